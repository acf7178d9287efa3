//! TOML run configuration. Each section mirrors one subcommand; a flag given
//! on the command line replaces the value from the file.
//!
//! ```toml
//! [data]
//! n = 2000
//! atoms = 16
//! box = 20.0
//! mode = "periodic"
//! seed = 7
//! path = "data.jsonl"
//!
//! [model]
//! hidden_dim = 8
//! r_short = 4.0
//!
//! [train]
//! epochs = 50
//! output = "runs/p3m"
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use np3m_core::data::BoundaryMode;
use np3m_core::train::TrainConfig;
use np3m_core::ModelConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ewald: EwaldSection,
    pub p3m: P3mSection,
    pub mesh: MeshSection,
    pub gradcheck: GradcheckSection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub atoms: usize,
    #[serde(rename = "box")]
    pub box_length: f64,
    pub mode: BoundaryMode,
    pub seed: u64,
    /// Where `data gen` writes.
    pub out: Option<PathBuf>,
    /// Dataset `train` reads; generated from the fields above when absent.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: 2000,
            atoms: 16,
            box_length: 20.0,
            mode: BoundaryMode::Periodic,
            seed: 7,
            out: None,
            path: None,
        }
    }
}

/// `[train]`: the schedule keys plus where to write and what to resume.
#[derive(Debug, Default, Deserialize)]
#[serde(default, try_from = "toml::Table")]
pub struct TrainSection {
    pub schedule: TrainConfig,
    /// Directory for best.json, last.json and metrics.jsonl.
    pub output: Option<PathBuf>,
    /// A last.json to continue from.
    pub resume: Option<PathBuf>,
}

impl TryFrom<toml::Table> for TrainSection {
    type Error = String;

    fn try_from(mut table: toml::Table) -> Result<Self, String> {
        let mut path = |key: &str| -> Result<Option<PathBuf>, String> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(PathBuf::from(s))),
                Some(v) => Err(format!("train.{key} must be a string, got {v}")),
            }
        };
        let output = path("output")?;
        let resume = path("resume")?;
        let schedule = TrainConfig::deserialize(table).map_err(|e| e.to_string())?;
        Ok(TrainSection { schedule, output, resume })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwaldSection {
    pub input: Option<PathBuf>,
    pub beta: Option<f64>,
    pub rcut: Option<f64>,
    pub mmax: Option<usize>,
    pub auto: Option<f64>,
    pub forces: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct P3mSection {
    pub input: Option<PathBuf>,
    pub mesh: Option<[usize; 3]>,
    pub order: Option<usize>,
    pub beta: Option<f64>,
    pub rcut: Option<f64>,
    pub forces: bool,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub input: Option<PathBuf>,
    pub padding: f64,
    pub rassign: f64,
    pub counts: Option<[usize; 3]>,
}

impl Default for MeshSection {
    fn default() -> Self {
        MeshSection {
            input: None,
            padding: np3m_core::mesh::DEFAULT_PADDING,
            rassign: 4.0,
            counts: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub seed: u64,
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: FileConfig = toml::from_str(&text)
        .map_err(|e| np3m_core::Error::Config(format!("{}: {}", path.display(), e.message().trim())))?;
    cfg.model.validate()?;
    cfg.train.schedule.validate()?;
    Ok(cfg)
}
