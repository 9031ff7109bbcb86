use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (manifests, frames, landmarks).
    #[error("data error: {0}")]
    Data(String),

    /// Misuse of an API, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { loss: f64, epoch: usize, step: usize },

    /// Videos of an evaluated split that received no score.
    #[error("no predictions for {} video(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigMismatch { found: String, expected: String },
    #[error("checkpoint stores {found} tensors but {expected} was requested")]
    Dtype { found: String, expected: String },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
