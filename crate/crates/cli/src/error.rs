use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing {}; run `semrec {command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: String },
    #[error(transparent)]
    Core(#[from] semrec::Error),
}

impl CliError {
    /// 0 ok, 1 usage or configuration, 2 data, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(semrec::Error::Config(_)) => 1,
            CliError::Core(semrec::Error::Divergence(_)) => 3,
            CliError::MissingArtifact { .. } | CliError::Core(_) => 2,
        }
    }
}

impl From<semrec::rqvae::TrainError> for CliError {
    fn from(e: semrec::rqvae::TrainError) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
