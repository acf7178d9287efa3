use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// The `Display` form of every variant is a single line so the CLI can print
/// it verbatim as a machine-parsable diagnostic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate cell: determinant {0:.3e}")]
    DegenerateCell(f64),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("cutoff {cutoff} exceeds the minimum-image bound {bound}")]
    CutoffTooLarge { cutoff: f64, bound: f64 },
    #[error("singular pair: atoms {0} and {1} coincide")]
    SingularPair(usize, usize),
    #[error("net charge {0:.3e} is not zero")]
    NetCharge(f64),
    #[error("missing charges")]
    MissingCharges,
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward already called on this tape")]
    BackwardTwice,
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown atomic number {0}")]
    UnknownSpecies(u32),
    #[error("packing too dense: could not place {atoms} atoms after {attempts} attempts")]
    PackingTooDense { atoms: usize, attempts: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

impl Error {
    /// Stable short identifier for the variant, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateCell(_) => "degenerate-cell",
            Error::InvalidSystem(_) => "invalid-system",
            Error::CutoffTooLarge { .. } => "cutoff-too-large",
            Error::SingularPair(..) => "singular-pair",
            Error::NetCharge(_) => "net-charge",
            Error::MissingCharges => "missing-charges",
            Error::Shape { .. } => "shape",
            Error::IndexOutOfRange { .. } => "index-out-of-range",
            Error::BackwardTwice => "backward-twice",
            Error::NonScalarOutput(_) => "non-scalar-output",
            Error::UnknownSpecies(_) => "unknown-species",
            Error::PackingTooDense { .. } => "packing-too-dense",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
