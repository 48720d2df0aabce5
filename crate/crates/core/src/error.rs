use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the ensemble library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input rejected: wrong shape, out-of-range index, malformed data.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A loss or gradient evaluation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
