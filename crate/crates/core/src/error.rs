use std::path::PathBuf;

use mmexpr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed line in a text input (labels, predictions).
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
    /// Input data that parses but is inconsistent or out of contract.
    #[error("{0}")]
    Validation(String),
    /// Bad configuration or argument combination.
    #[error("{0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 1 usage, 2 data validation, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NaN { .. }) => 3,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Io { .. }
            | Error::Tensor(_)
            | Error::Json { .. } => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
