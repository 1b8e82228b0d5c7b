use std::path::PathBuf;

use thiserror::Error;

use fedsim_core::FedError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Sim(#[from] FedError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("oracle check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for bad input, 1 for failures at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_)
            | Self::Sim(FedError::InvalidConfig(_) | FedError::InvalidWeights(_)) => 2,
            _ => 1,
        }
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
