//! Training loop, evaluation and checkpoints.
//!
//! Each structure gets its own tape; per-structure gradients are summed in a
//! fixed order so the trajectory does not depend on the thread count.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::model::{Geometry, Model, ModelConfig, ParamStore, Standardization};
use crate::optim::{AdamW, AdamWConfig, PlateauScheduler};

pub const CHECKPOINT_FORMAT: &str = "np3m-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Step size of the central difference used for the force-loss gradient.
const HVP_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before the lr is decayed.
    pub patience: usize,
    pub decay_factor: f64,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    /// Standardize energy labels with the training-split mean and std.
    pub standardize: bool,
    /// Train the short-range-only model of matched parameter count instead.
    pub ablate_mesh: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Scaled-down schedule: warm-up 100 steps, plateau 10, early stop 60.
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            patience: 10,
            decay_factor: 0.8,
            early_stop_patience: 60,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            standardize: true,
            ablate_mesh: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("epochs, batch size and patiences must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("bad lr {} or decay factor {}", self.lr, self.decay_factor)));
        }
        if self.split.iter().any(|f| *f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must sum to 1", self.split)));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Energy MAE over the epoch's training batches, measured before each update.
    pub train_energy_mae: f64,
    pub val_energy_mae: f64,
    pub val_force_mae: f64,
    pub lr: f64,
    pub lr_decayed: bool,
    pub best: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub energy_mae: f64,
    pub force_mae: f64,
    pub count: usize,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub optimizer: AdamW,
    pub scheduler: PlateauScheduler,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub best_params: ParamStore,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk checkpoint (JSON). See the README for the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub mesh_counts: [usize; 3],
    pub standardization: Standardization,
    pub tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, training: Option<TrainState>) -> Self {
        let tensors = model
            .params
            .names
            .iter()
            .zip(&model.params.tensors)
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: t.shape.clone(),
                data: t.data.clone(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            mesh_counts: model.counts,
            standardization: model.standardization,
            tensors,
            training,
        }
    }

    /// Rebuild the model, checking every tensor against a freshly
    /// constructed model of the stored configuration.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = Model::new(self.config.clone(), self.mesh_counts)?;
        if model.params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                self.tensors.len()
            )));
        }
        for rec in &self.tensors {
            let t = model
                .params
                .get_mut(&rec.name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor {:?}", rec.name)))?;
            if t.shape != rec.shape {
                return Err(Error::Checkpoint(format!("tensor {:?} has shape {:?}, expected {:?}", rec.name, rec.shape, t.shape)));
            }
            *t = Tensor::new(rec.shape.clone(), rec.data.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {:?}: {e}", rec.name)))?;
        }
        model.standardization = self.standardization;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if let Some(t) = ck.training.as_mut() {
            t.best_params.rebuild_index();
        }
        Ok(ck)
    }
}

/// Model for `config` sized to `reference`'s cell, or its matched
/// short-range baseline when `ablate_mesh` is set.
pub fn build_model(config: &ModelConfig, reference: &crate::geometry::AtomSystem, ablate_mesh: bool) -> Result<Model> {
    let model = Model::for_system(config.clone(), reference)?;
    if ablate_mesh {
        Model::for_system(model.matched_baseline_config()?, reference)
    } else {
        Ok(model)
    }
}

/// Mean and std of training energies; std falls back to 1 for constant labels.
pub fn standardization_from(records: &[&DatasetRecord]) -> Standardization {
    if records.is_empty() {
        return Standardization::default();
    }
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.energy).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.energy - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Standardization {
        energy_mean: mean,
        energy_std: if std > 1e-12 { std } else { 1.0 },
    }
}

/// A record with its model geometry prepared once.
pub struct Prepared<'a> {
    pub record: &'a DatasetRecord,
    pub geometry: Geometry,
}

pub fn prepare_records<'a>(model: &Model, records: &[&'a DatasetRecord]) -> Result<Vec<Prepared<'a>>> {
    records
        .par_iter()
        .map(|r| {
            Ok(Prepared {
                record: r,
                geometry: model.geometry(&r.system()?)?,
            })
        })
        .collect()
}

/// Loss, parameter gradient and raw energy prediction for one structure.
pub struct StructureGradient {
    pub loss: f64,
    pub energy: f64,
    pub grads: Vec<Vec<f64>>,
}

fn param_grads(model: &Model, g: &Geometry, positions: &[Vec3], need_positions: bool) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let tape = Tape::with_backend(model.backend);
    let fw = model.forward(&tape, g, positions, true, need_positions)?;
    let e = tape.item(fw.energy);
    let grads = tape.backward(fw.energy)?;
    let dx = grads.get_or_zeros(fw.positions, 3 * g.n_atoms);
    let dp = fw
        .params
        .vars()
        .iter()
        .zip(&model.params.tensors)
        .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
        .collect();
    Ok((e, dx, dp))
}

/// Gradient of λ_E (ẽ − Ê)² + λ_F/(3N) Σ‖F̃ + ∇Ê‖² in standardized units.
/// The force term's parameter gradient needs the mixed second derivative
/// ∂²Ê/∂θ∂x applied to the residual; it is taken as a central difference of
/// parameter gradients along the residual direction.
pub fn structure_gradient(model: &Model, p: &Prepared) -> Result<StructureGradient> {
    let cfg = &model.config;
    let s = model.standardization;
    let r = p.record;
    let target = (r.energy - s.energy_mean) / s.energy_std;
    let use_forces = cfg.lambda_f > 0.0;
    let (e, dx, dp) = param_grads(model, &p.geometry, &r.positions, use_forces)?;
    let de = e - target;
    let mut grads: Vec<Vec<f64>> = dp.iter().map(|g| g.iter().map(|v| 2.0 * cfg.lambda_e * de * v).collect()).collect();
    let mut loss = cfg.lambda_e * de * de;
    if use_forces {
        let n = r.positions.len();
        let resid: Vec<f64> = (0..3 * n).map(|k| r.forces[k / 3][k % 3] / s.energy_std + dx[k]).collect();
        let fl: f64 = resid.iter().map(|v| v * v).sum();
        loss += cfg.lambda_f * fl / (3.0 * n as f64);
        let scale = resid.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale > 0.0 {
            let h = HVP_STEP / scale;
            let shifted = |sign: f64| -> Vec<Vec3> {
                r.positions
                    .iter()
                    .enumerate()
                    .map(|(i, x)| [0, 1, 2].map(|a| x[a] + sign * h * resid[3 * i + a]))
                    .collect()
            };
            let (_, _, plus) = param_grads(model, &p.geometry, &shifted(1.0), false)?;
            let (_, _, minus) = param_grads(model, &p.geometry, &shifted(-1.0), false)?;
            let c = cfg.lambda_f * 2.0 / (3.0 * n as f64) / (2.0 * h);
            for (k, g) in grads.iter_mut().enumerate() {
                for (i, v) in g.iter_mut().enumerate() {
                    *v += c * (plus[k][i] - minus[k][i]);
                }
            }
        }
    }
    Ok(StructureGradient { loss, energy: e, grads })
}

/// Energy and force MAE in label units; evaluated in parallel, reduced in order.
pub fn evaluate_prepared(model: &Model, prepared: &[Prepared]) -> Result<EvalMetrics> {
    let per: Vec<(f64, f64, usize)> = prepared
        .par_iter()
        .map(|p| {
            let pred = model.predict_prepared(&p.geometry, &p.record.positions)?;
            let fe: f64 = pred
                .forces
                .iter()
                .zip(&p.record.forces)
                .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>())
                .sum();
            Ok(((pred.energy - p.record.energy).abs(), fe, 3 * p.record.forces.len()))
        })
        .collect::<Result<_>>()?;
    let count = per.len();
    let (mut e, mut f, mut nf) = (0.0, 0.0, 0usize);
    for (a, b, c) in per {
        e += a;
        f += b;
        nf += c;
    }
    Ok(EvalMetrics {
        energy_mae: if count > 0 { e / count as f64 } else { 0.0 },
        force_mae: if nf > 0 { f / nf as f64 } else { 0.0 },
        count,
    })
}

pub fn evaluate(model: &Model, records: &[DatasetRecord]) -> Result<EvalMetrics> {
    let refs: Vec<&DatasetRecord> = records.iter().collect();
    evaluate_prepared(model, &prepare_records(model, &refs)?)
}

/// Stepwise trainer; `train` drives it to completion.
pub struct Trainer<'a> {
    pub model: Model,
    pub state: TrainState,
    train: Vec<Prepared<'a>>,
    val: Vec<Prepared<'a>>,
}

impl<'a> Trainer<'a> {
    /// Fresh run. Standardization is fitted on `train` only.
    pub fn new(mut model: Model, config: TrainConfig, train: &[&'a DatasetRecord], val: &[&'a DatasetRecord]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if config.standardize {
            model.standardization = standardization_from(train);
        }
        let optimizer = AdamW::new(config.adamw(), &model.params.tensors);
        let scheduler = PlateauScheduler::new(config.decay_factor, config.patience);
        let state = TrainState {
            epoch: 0,
            optimizer,
            scheduler,
            best_val: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            best_params: model.params.clone(),
            metrics: vec![],
            config,
        };
        Self::resume(model, state, train, val)
    }

    /// Continue from a saved state; `model` must hold the weights at the end
    /// of the state's last epoch.
    pub fn resume(model: Model, state: TrainState, train: &[&'a DatasetRecord], val: &[&'a DatasetRecord]) -> Result<Self> {
        let train = prepare_records(&model, train)?;
        let val = prepare_records(&model, val)?;
        Ok(Trainer { model, state, train, val })
    }

    pub fn finished(&self) -> bool {
        let s = &self.state;
        s.epoch >= s.config.epochs || s.epochs_since_best >= s.config.early_stop_patience
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed);
        rng.set_stream(self.state.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let order = self.epoch_order();
        let epoch = self.state.epoch + 1;
        let mut loss_sum = 0.0;
        let mut mae_sum = 0.0;
        for (step, batch) in order.chunks(self.state.config.batch_size).enumerate() {
            let model = &self.model;
            let results: Vec<StructureGradient> = batch
                .par_iter()
                .map(|&i| structure_gradient(model, &self.train[i]))
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut total: Vec<Vec<f64>> = model.params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            let mut batch_loss = 0.0;
            for (r, &i) in results.iter().zip(batch) {
                batch_loss += r.loss;
                let s = model.standardization;
                mae_sum += (s.energy_mean + s.energy_std * r.energy - self.train[i].record.energy).abs();
                for (t, g) in total.iter_mut().zip(&r.grads) {
                    for (a, b) in t.iter_mut().zip(g) {
                        *a += b * inv;
                    }
                }
            }
            if !batch_loss.is_finite() || total.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: step + 1,
                    loss: batch_loss * inv,
                });
            }
            loss_sum += batch_loss;
            self.state.optimizer.update(&mut self.model.params.tensors, &total)?;
        }
        let val = if self.val.is_empty() {
            None
        } else {
            Some(evaluate_prepared(&self.model, &self.val)?)
        };
        let n = self.train.len() as f64;
        let train_mae = mae_sum / n;
        // without a validation set the training MAE is monitored instead
        let monitored = val.map(|v| v.energy_mae).unwrap_or(train_mae);
        let lr_decayed = self.state.scheduler.observe(monitored, &mut self.state.optimizer);
        let best = monitored < self.state.best_val;
        if best {
            self.state.best_val = monitored;
            self.state.best_epoch = epoch;
            self.state.epochs_since_best = 0;
            self.state.best_params = self.model.params.clone();
        } else {
            self.state.epochs_since_best += 1;
        }
        self.state.epoch = epoch;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_energy_mae: train_mae,
            val_energy_mae: val.map(|v| v.energy_mae).unwrap_or(f64::NAN),
            val_force_mae: val.map(|v| v.force_mae).unwrap_or(f64::NAN),
            lr: self.state.optimizer.current_lr(),
            lr_decayed,
            best,
        };
        log::info!(
            "epoch {epoch}: loss {:.6e} train MAE {:.6e} val MAE {:.6e} lr {:.3e}{}",
            m.train_loss,
            m.train_energy_mae,
            m.val_energy_mae,
            m.lr,
            if lr_decayed { " (decayed)" } else { "" }
        );
        self.state.metrics.push(m.clone());
        Ok(m)
    }

    /// Model carrying the best-validation weights.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        m.params = self.state.best_params.clone();
        m
    }

    /// Resumable checkpoint of the current (not best) weights.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.state.clone()))
    }
}

/// Where `train` persists its outputs.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.json")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

pub struct TrainOutcome {
    pub best: Model,
    pub metrics: Vec<EpochMetrics>,
    pub state: TrainState,
}

/// Train to completion or early stop. With `output`, the best checkpoint,
/// a resumable last checkpoint and the metrics log are written after every
/// epoch.
pub fn train(
    model: Model,
    config: TrainConfig,
    train_set: &[&DatasetRecord],
    val_set: &[&DatasetRecord],
    output: Option<&OutputPaths>,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(model, config, train_set, val_set)?;
    drive(trainer, output)
}

pub fn drive(mut trainer: Trainer, output: Option<&OutputPaths>) -> Result<TrainOutcome> {
    if let Some(out) = output {
        std::fs::create_dir_all(&out.dir)?;
    }
    while !trainer.finished() {
        let m = trainer.run_epoch()?;
        if let Some(out) = output {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out.metrics())?;
            serde_json::to_writer(&mut f, &m)?;
            f.write_all(b"\n")?;
            if m.best {
                Checkpoint::from_model(&trainer.best_model(), None).save(&out.best())?;
            }
            trainer.checkpoint().save(&out.last())?;
        }
    }
    Ok(TrainOutcome {
        best: trainer.best_model(),
        metrics: trainer.state.metrics.clone(),
        state: trainer.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, BoundaryMode};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 4,
            num_rbf: 4,
            r_short: 3.0,
            r_assign: 3.0,
            mesh_counts: Some([2, 2, 2]),
            ..Default::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            warmup_steps: 2,
            lr: 5e-3,
            ..Default::default()
        }
    }

    #[test]
    fn resume_is_bit_identical() {
        let data = generate_synthetic(8, 4, 6.0, BoundaryMode::Periodic, 3).unwrap();
        let refs: Vec<&DatasetRecord> = data.iter().collect();
        let (tr, va) = refs.split_at(6);
        let model = Model::new(tiny_config(), [2, 2, 2]).unwrap();
        let mut full = Trainer::new(model.clone(), tiny_train(), tr, va).unwrap();
        full.run_epoch().unwrap();
        let ck = full.checkpoint();
        let text = serde_json::to_string(&ck).unwrap();
        let m2 = full.run_epoch().unwrap();

        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        let mut state = back.training.clone().unwrap();
        state.best_params.rebuild_index();
        let mut resumed = Trainer::resume(back.to_model().unwrap(), state, tr, va).unwrap();
        let r2 = resumed.run_epoch().unwrap();
        assert_eq!(m2, r2);
        assert_eq!(full.model.params.tensors, resumed.model.params.tensors);
    }

    #[test]
    fn nan_labels_abort_with_diagnostic() {
        let mut data = generate_synthetic(2, 2, 6.0, BoundaryMode::Periodic, 1).unwrap();
        data[0].energy = f64::NAN;
        let refs: Vec<&DatasetRecord> = data.iter().collect();
        let cfg = TrainConfig {
            standardize: false,
            ..tiny_train()
        };
        let model = Model::new(tiny_config(), [2, 2, 2]).unwrap();
        let err = train(model, cfg, &refs, &[], None).err().unwrap();
        assert!(matches!(err, Error::Diverged { epoch: 1, step: 1, .. }), "{err}");
    }

    #[test]
    fn zero_model_mae_is_mean_absolute_label() {
        let data = generate_synthetic(5, 4, 6.0, BoundaryMode::Periodic, 2).unwrap();
        let model = Model::new(tiny_config(), [2, 2, 2]).unwrap();
        let m = evaluate(&model, &data).unwrap();
        let expected = data.iter().map(|r| r.energy.abs()).sum::<f64>() / 5.0;
        assert!((m.energy_mae - expected).abs() < 1e-12);
        let mut shuffled = data.clone();
        shuffled.reverse();
        assert!((evaluate(&model, &shuffled).unwrap().energy_mae - m.energy_mae).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_rejects_wrong_version_and_shapes() {
        let model = Model::new(tiny_config(), [2, 2, 2]).unwrap();
        let mut ck = Checkpoint::from_model(&model, None);
        assert_eq!(ck.to_model().unwrap().params, model.params);
        ck.tensors[0].shape = vec![1];
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
        let mut ck = Checkpoint::from_model(&model, None);
        ck.version = 99;
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn force_loss_gradient_matches_finite_difference() {
        let data = generate_synthetic(1, 4, 6.0, BoundaryMode::Periodic, 5).unwrap();
        let cfg = ModelConfig {
            lambda_f: 1.0,
            ..tiny_config()
        };
        let mut model = Model::new(cfg, [2, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        for t in model.params.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let refs = vec![&data[0]];
        let prepared = prepare_records(&model, &refs).unwrap();
        let g = structure_gradient(&model, &prepared[0]).unwrap();
        // decoder output bias and a spectral weight
        for (name, idx) in [("decoder.atom.mlp.1.w", 2), ("blocks.0.m2m.spectral.re", 5)] {
            let k = model.params.names.iter().position(|n| n == name).unwrap();
            let h = 1e-5;
            let mut lp = model.clone();
            lp.params.tensors[k].data[idx] += h;
            let mut lm = model.clone();
            lm.params.tensors[k].data[idx] -= h;
            let fp = structure_gradient(&lp, &prepared[0]).unwrap().loss;
            let fm = structure_gradient(&lm, &prepared[0]).unwrap().loss;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.grads[k][idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{name}: fd {fd} vs {an}");
        }
    }
}
