use std::path::PathBuf;

use cipnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { step: u64, term: &'static str },
    #[error("degenerate head: class row {row} has zero norm")]
    DegenerateHead { row: usize },
    #[error("out of range: {0}")]
    Range(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFinite { .. } => 3,
            Error::DegenerateHead { .. } => 3,
            Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
