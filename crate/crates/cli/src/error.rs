use std::path::Path;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),

    /// Missing, malformed or incompatible data, and failures while
    /// processing it.
    #[error(transparent)]
    Data(#[from] mttrack_core::Error),

    #[error("{failed} self-test check(s) failed")]
    SelftestFailed { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::SelftestFailed { .. } => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(mttrack_core::Error::Input(format!("{}: {e}", path.display())))
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        CliError::Data(mttrack_core::Error::Input(msg.into()))
    }
}
