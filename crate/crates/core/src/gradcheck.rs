//! Finite-difference check of the model's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{generate_synthetic, BoundaryMode};
use crate::error::Result;
use crate::geometry::AtomSystem;
use crate::model::{Model, ModelConfig};

/// Step of the five-point central difference.
pub const STEP: f64 = 1e-5;

/// f'(0) from f(±h), f(±2h), with O(h⁴) truncation error.
fn five_point(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = STEP;
    Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub entries: usize,
    /// max |fd − analytic| / max |analytic| over the group.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub groups: Vec<GroupError>,
    pub positions: GroupError,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().chain([&self.positions]).map(|g| g.rel_error).fold(0.0, f64::max)
    }
}

/// Random periodic six-atom system and a small model with every weight
/// perturbed, so no gradient is trivially zero.
pub fn random_case(seed: u64) -> Result<(AtomSystem, Model)> {
    let record = generate_synthetic(1, 6, 7.0, BoundaryMode::Periodic, seed)?.remove(0);
    let system = record.system()?;
    let config = ModelConfig {
        hidden_dim: 4,
        num_rbf: 4,
        r_short: 3.0,
        r_assign: 3.0,
        mesh_counts: Some([3, 3, 3]),
        seed,
        ..Default::default()
    };
    let mut model = Model::for_system(config, &system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for t in model.params.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    Ok((system, model))
}

fn group_error(name: String, fd: &[f64], an: &[f64]) -> GroupError {
    let scale = an.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    let diff = fd.iter().zip(an).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    GroupError {
        name,
        entries: an.len(),
        rel_error: diff / scale,
    }
}

/// Check every parameter tensor and every position coordinate. Position
/// differences re-prepare the geometry from scratch.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let (system, model) = random_case(seed)?;
    let g = model.geometry(&system)?;
    let tape = Tape::with_backend(model.backend);
    let fw = model.forward(&tape, &g, &system.positions, true, true)?;
    let grads = tape.backward(fw.energy)?;
    let energy = |m: &Model, s: &AtomSystem| -> Result<f64> {
        let t = Tape::with_backend(m.backend);
        let geom = m.geometry(s)?;
        Ok(t.item(m.forward(&t, &geom, &s.positions, false, false)?.energy))
    };

    let mut groups = vec![];
    for (k, name) in model.params.names.iter().enumerate() {
        let an = grads.get_or_zeros(fw.params.vars()[k], model.params.tensors[k].len());
        let mut fd = vec![0.0; an.len()];
        let mut probe = model.clone();
        for i in 0..an.len() {
            let orig = probe.params.tensors[k].data[i];
            fd[i] = five_point(|dx| {
                probe.params.tensors[k].data[i] = orig + dx;
                energy(&probe, &system)
            })?;
            probe.params.tensors[k].data[i] = orig;
        }
        groups.push(group_error(name.clone(), &fd, &an));
    }

    let an = grads.get_or_zeros(fw.positions, 3 * system.len());
    let mut fd = vec![0.0; an.len()];
    let mut moved = system.clone();
    for i in 0..an.len() {
        let orig = moved.positions[i / 3][i % 3];
        fd[i] = five_point(|dx| {
            moved.positions[i / 3][i % 3] = orig + dx;
            energy(&model, &moved)
        })?;
        moved.positions[i / 3][i % 3] = orig;
    }
    Ok(GradcheckReport {
        seed,
        groups,
        positions: group_error("positions".into(), &fd, &an),
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn model_gradients_match_finite_differences() {
        let r = super::gradcheck(1).unwrap();
        for g in r.groups.iter().chain([&r.positions]) {
            assert!(g.rel_error < 1e-5, "{} {}", g.name, g.rel_error);
        }
    }
}
