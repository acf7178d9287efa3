//! Synthetic point-charge datasets labelled by the classical solvers, splits,
//! and the JSON-lines dataset file.

use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewald::{direct_coulomb, ewald_components, tune_params, EwaldParams};
use crate::geometry::{diagonal_cell, minimum_image_displacement, norm, sub, AtomSystem, Mat3, Vec3};

/// Minimum distance between generated atoms (Å).
pub const MIN_SEPARATION: f64 = 1.5;
/// Atomic numbers standing in for the +1 and −1 ions.
pub const CATION_Z: u32 = 11;
pub const ANION_Z: u32 = 17;
/// Truncation tolerance used for Ewald labels.
pub const LABEL_TOLERANCE: f64 = 1e-10;
const MAX_ATTEMPTS_PER_ATOM: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    Periodic,
    Open,
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(BoundaryMode::Periodic),
            "open" => Ok(BoundaryMode::Open),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected periodic or open)"))),
        }
    }
}

/// Which oracle produced a label, with what parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub oracle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ewald: Option<EwaldParams>,
    pub seed: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub positions: Vec<Vec3>,
    pub numbers: Vec<u32>,
    pub charges: Vec<f64>,
    pub cell: Option<Mat3>,
    pub pbc: [bool; 3],
    pub energy: f64,
    pub forces: Vec<Vec3>,
    pub provenance: Provenance,
}

impl DatasetRecord {
    pub fn system(&self) -> Result<AtomSystem> {
        AtomSystem::new(
            self.positions.clone(),
            self.numbers.clone(),
            Some(self.charges.clone()),
            self.cell,
            self.pbc,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.system()?;
        if !self.energy.is_finite() || self.forces.iter().flatten().any(|f| !f.is_finite()) {
            return Err(Error::InvalidSystem("non-finite label".into()));
        }
        if self.forces.len() != self.positions.len() {
            return Err(Error::InvalidSystem("forces do not match atom count".into()));
        }
        Ok(())
    }
}

/// Recompute a record's label with the oracle named in its provenance.
pub fn relabel(record: &DatasetRecord) -> Result<(f64, Vec<Vec3>)> {
    let sys = record.system()?;
    match (record.provenance.oracle.as_str(), &record.provenance.ewald) {
        ("ewald", Some(p)) => {
            let b = ewald_components(&sys, p)?;
            Ok((b.total, b.forces))
        }
        ("direct_coulomb", _) => direct_coulomb(&sys),
        (o, _) => Err(Error::Config(format!("unknown oracle {o:?}"))),
    }
}

fn structure_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn sample_structure(n_atoms: usize, box_length: f64, mode: BoundaryMode, seed: u64, index: usize) -> Result<DatasetRecord> {
    let mut rng = structure_rng(seed, index);
    let cell = diagonal_cell(box_length, box_length, box_length);
    let periodic = mode == BoundaryMode::Periodic;
    let mut positions: Vec<Vec3> = Vec::with_capacity(n_atoms);
    let mut attempts = 0;
    while positions.len() < n_atoms {
        attempts += 1;
        if attempts > MAX_ATTEMPTS_PER_ATOM * n_atoms {
            return Err(Error::PackingTooDense {
                atoms: n_atoms,
                attempts,
            });
        }
        let x = [
            rng.random_range(0.0..box_length),
            rng.random_range(0.0..box_length),
            rng.random_range(0.0..box_length),
        ];
        let clear = positions.iter().all(|&y| {
            let d = if periodic {
                minimum_image_displacement(x, y, Some(&cell), [true; 3]).map(|(d, _)| norm(d)).unwrap_or(0.0)
            } else {
                norm(sub(x, y))
            };
            d >= MIN_SEPARATION
        });
        if clear {
            positions.push(x);
        }
    }
    let mut charges: Vec<f64> = (0..n_atoms).map(|i| if i < n_atoms / 2 { 1.0 } else { -1.0 }).collect();
    charges.shuffle(&mut rng);
    let numbers = charges.iter().map(|&q| if q > 0.0 { CATION_Z } else { ANION_Z }).collect();
    let (sys, pbc) = if periodic {
        (AtomSystem::periodic(positions, numbers, Some(charges), cell)?, [true; 3])
    } else {
        (AtomSystem::molecule(positions, numbers, Some(charges))?, [false; 3])
    };
    let (energy, forces, provenance) = if periodic {
        let params = tune_params(&sys, LABEL_TOLERANCE)?;
        let b = ewald_components(&sys, &params)?;
        let prov = Provenance {
            oracle: "ewald".into(),
            ewald: Some(params),
            seed,
            index,
        };
        (b.total, b.forces, prov)
    } else {
        let (e, f) = direct_coulomb(&sys)?;
        let prov = Provenance {
            oracle: "direct_coulomb".into(),
            ewald: None,
            seed,
            index,
        };
        (e, f, prov)
    };
    Ok(DatasetRecord {
        positions: sys.positions,
        numbers: sys.species,
        charges: sys.charges.unwrap_or_default(),
        cell: if periodic { Some(cell) } else { None },
        pbc,
        energy,
        forces,
        provenance,
    })
}

/// Random neutral ±1 point-charge structures in a cubic box of side
/// `box_length` (Å) with a minimum separation of [`MIN_SEPARATION`],
/// labelled by Ewald summation (periodic) or the direct pair sum (open).
/// Each structure draws from its own stream derived from `(seed, index)`, so
/// output does not depend on thread count.
pub fn generate_synthetic(
    n_structures: usize,
    n_atoms: usize,
    box_length: f64,
    mode: BoundaryMode,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if n_atoms == 0 || n_atoms % 2 != 0 {
        return Err(Error::Config(format!("atom count must be even and positive, got {n_atoms}")));
    }
    if !(box_length > 0.0) {
        return Err(Error::Config(format!("box length must be positive, got {box_length}")));
    }
    (0..n_structures)
        .into_par_iter()
        .map(|i| sample_structure(n_atoms, box_length, mode, seed, i))
        .collect()
}

/// Disjoint (train, validation, test) index sets from a seeded shuffle.
/// Train and validation sizes are `round(f · n)`; the test set takes the rest.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let train = (fractions[0] * n as f64).round() as usize;
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train);
    split_counts(n, train, val, seed)
}

/// Split with explicit train and validation sizes.
pub fn split_counts(n: usize, train: usize, val: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if train + val > n {
        return Err(Error::Config(format!("split sizes {train} + {val} exceed {n} records")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(train + val);
    let val_set = idx.split_off(train);
    Ok((idx, val_set, test))
}

pub fn write_dataset<W: Write>(mut out: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<DatasetRecord>> {
    let mut records = vec![];
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        r.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}

pub fn save_dataset(path: &std::path::Path, records: &[DatasetRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<Vec<DatasetRecord>> {
    read_dataset(std::fs::File::open(path)?)
}
