use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate vector (zero norm) at row {row}")]
    DegenerateVector { row: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("batch contains a single class; no negatives available")]
    NoNegatives,

    #[error("insufficient data for PK sampling: {0}")]
    Capacity(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("singular point: {0}")]
    Singularity(String),

    #[error("degenerate concentration: mean resultant length {0} is too close to 1")]
    DegenerateConcentration(f64),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged at iteration {iteration}: loss = {value}")]
    Diverged { iteration: usize, value: f64 },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
