use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PitaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PitaError {
    #[error("degenerate configuration: particles {i} and {j} are {distance:e} apart")]
    DegenerateConfiguration { i: usize, j: usize, distance: f64 },

    #[error("invalid inverse temperature {0} (must be > 0)")]
    InvalidTemperature(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at batch index {batch_index}: {what}")]
    NumericalError { batch_index: usize, what: String },

    #[error("buffer is empty")]
    EmptyBuffer,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("all particle weights are zero")]
    DegenerateWeights,

    #[error("{n} points exceeds the assignment cap of {cap}; subsample before calling")]
    SizeCapExceeded { n: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("low effective sample size {ess:.4} below floor {floor}")]
    LowEss { ess: f64, floor: f64 },

    #[error("corrupt manifest at {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PitaError {
    /// Short machine-readable tag used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            PitaError::DegenerateConfiguration { .. } => "degenerate_configuration",
            PitaError::InvalidTemperature(_) => "invalid_temperature",
            PitaError::DimensionMismatch { .. } => "dimension_mismatch",
            PitaError::NumericalError { .. } => "numerical_error",
            PitaError::EmptyBuffer => "empty_buffer",
            PitaError::EmptyInput(_) => "empty_input",
            PitaError::DegenerateWeights => "degenerate_weights",
            PitaError::SizeCapExceeded { .. } => "size_cap_exceeded",
            PitaError::Config(_) => "config",
            PitaError::TrainingAborted(_) => "training_aborted",
            PitaError::LowEss { .. } => "low_ess",
            PitaError::CorruptManifest { .. } => "corrupt_manifest",
            PitaError::Locked(_) => "locked",
            PitaError::Format { .. } => "format",
            PitaError::Io(_) => "io",
            PitaError::Json(_) => "json",
        }
    }
}
