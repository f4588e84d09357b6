use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("step {step} out of range {min}..={max}")]
    StepOutOfRange { step: usize, min: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate computation: {0}")]
    Degenerate(String),

    #[error("input is already classified as target class {0}")]
    AlreadyTarget(usize),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-readable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::StepOutOfRange { .. } => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Degenerate(_) => "degenerate",
            Error::AlreadyTarget(_) => "already-target",
            Error::Format { .. } => "malformed-file",
            Error::Checkpoint(_) => "bad-checkpoint",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "missing-file"
            }
            Error::Io { .. } => "io",
            Error::Json(_) => "malformed-file",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
