use std::path::PathBuf;

use fcppn_core::optim::OptimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("checkpoint conflict: {0}")]
    Conflict(String),

    #[error("optimization failed to start: {0}")]
    Start(String),

    #[error("gradient check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(fcppn_core::Error),
}

impl RunError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) | RunError::Conflict(_) => 1,
            RunError::Io { .. } | RunError::Parse { .. } => 2,
            RunError::Start(_) => 3,
            RunError::CheckFailed(_) => 4,
            RunError::Core(e) => match e {
                fcppn_core::Error::Io(_) | fcppn_core::Error::Container(_) => 2,
                fcppn_core::Error::NonFinite { .. } | fcppn_core::Error::Optim(_) => 3,
                _ => 1,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunError {
        let path = path.into();
        move |source| RunError::Io { path, source }
    }

    pub fn parse(path: impl Into<PathBuf>, detail: impl ToString) -> RunError {
        RunError::Parse {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}

impl From<fcppn_core::Error> for RunError {
    fn from(e: fcppn_core::Error) -> Self {
        match e {
            fcppn_core::Error::Optim(OptimError::NonFiniteStart) => RunError::Start(e.to_string()),
            other => RunError::Core(other),
        }
    }
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;
