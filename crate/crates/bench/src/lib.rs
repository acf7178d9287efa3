//! Shared fixtures for the criterion benches.

use np3m_core::data::{generate_synthetic, BoundaryMode};
use np3m_core::AtomSystem;

/// Random neutral periodic system with the generator's ±1 charges.
pub fn periodic_system(atoms: usize, box_length: f64, seed: u64) -> AtomSystem {
    generate_synthetic(1, atoms, box_length, BoundaryMode::Periodic, seed)
        .and_then(|mut r| r.remove(0).system())
        .expect("fixture generation")
}
