use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("window too small: sequence length {len} is shorter than kernel width {width}")]
    WindowTooSmall { len: usize, width: usize },

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("invalid drive cycle {path}: {reason}")]
    InvalidCycle { path: PathBuf, reason: String },

    #[error("missing drive cycles: {}", .0.join(", "))]
    MissingCycles(Vec<String>),

    #[error("zero variance in channel {0} of the training split")]
    ZeroVariance(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("stale or missing forward cache: {0}")]
    StaleCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
