use std::path::PathBuf;

use demp_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("unknown emotion label {0:?}")]
    UnknownLabel(String),

    #[error("{0}")]
    Invalid(String),

    #[error("checkpoint checksum mismatch: {0}")]
    Checksum(String),

    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Config(_) | Error::UnknownLabel(_) | Error::Invalid(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
