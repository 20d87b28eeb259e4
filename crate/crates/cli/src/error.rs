use std::path::Path;

use thiserror::Error;

/// Failure of a CLI command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input data.
    #[error("{0}")]
    Validation(String),
    /// The model or optimizer did not reach the requested accuracy.
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<tlens::Error> for CliError {
    fn from(e: tlens::Error) -> Self {
        match e {
            tlens::Error::Numerical { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
