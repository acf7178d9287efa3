//! AdamW with linear warm-up, and a plateau-triggered learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from lr/warmup to lr.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

/// Optimizer state; serializable so training can resume bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Multiplier applied on top of the warm-up schedule (plateau decays).
    pub lr_scale: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        AdamW {
            config,
            lr_scale: 1.0,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        let t = self.step + 1;
        let warm = if self.config.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.config.lr * self.lr_scale * warm
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("optimizer", "parameter count changed"));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.len() || self.m[k].len() != p.len() {
                return Err(Error::shape("optimizer", format!("gradient {k} has length {}", g.len())));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve for `patience` consecutive epochs, then starts counting
/// again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
    pub decays: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
            decays: 0,
        }
    }

    /// Record one epoch's metric; returns true when a decay fires.
    pub fn observe(&mut self, metric: f64, optimizer: &mut AdamW) -> bool {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            optimizer.lr_scale *= self.factor;
            self.bad_epochs = 0;
            self.decays += 1;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..10 {
            opt.update(&mut p, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p[0].data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn plateau_decays_once_for_flat_metric() {
        let p = vec![Tensor::zeros(&[1])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut sched = PlateauScheduler::new(0.8, 2);
        let fired: Vec<bool> = [5.0, 5.0, 5.0].iter().map(|&m| sched.observe(m, &mut opt)).collect();
        assert_eq!(fired, vec![false, false, true]);
        assert_eq!(sched.decays, 1);
        assert!((opt.lr_scale - 0.8).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = vec![Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap()];
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                ..Default::default()
            },
            &p,
        );
        let mut steps = 0;
        loop {
            let f: f64 = p[0].data.iter().map(|w| w * w).sum();
            if f < 1e-6 {
                break;
            }
            steps += 1;
            assert!(steps <= 500, "no convergence: f = {f}");
            let g: Vec<f64> = p[0].data.iter().map(|w| 2.0 * w).collect();
            opt.update(&mut p, &[g]).unwrap();
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        let p = vec![Tensor::zeros(&[1])];
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1.0,
                warmup_steps: 4,
                ..Default::default()
            },
            &p,
        );
        let mut lrs = vec![];
        let mut q = p.clone();
        for _ in 0..6 {
            lrs.push(opt.current_lr());
            opt.update(&mut q, &[vec![1.0]]).unwrap();
        }
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }
}
