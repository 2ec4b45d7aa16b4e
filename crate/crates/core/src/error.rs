use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the indexing, prompt and ranking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("capacity exceeded: {users} users but only {capacity} distinct ids")]
    Capacity { users: usize, capacity: u128 },

    #[error("external service error: {0}")]
    External(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
