use oed_core::Error as CoreError;

use crate::config::ConfigError;

/// Failure of a command, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: exit status 2.
    #[error("{0}")]
    Validation(String),
    /// Numerical or I/O failure: exit status 1.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.0)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Mesh(_)
            | CoreError::DegenerateTriangle(_)
            | CoreError::Dimension { .. }
            | CoreError::InvalidArgument(_)
            | CoreError::TooLarge { .. } => CliError::Validation(e.to_string()),
            CoreError::NotPositiveDefinite { .. }
            | CoreError::Singular(_)
            | CoreError::NoConvergence { .. }
            | CoreError::CgStalled { .. }
            | CoreError::Io(_) => CliError::Failure(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Failure(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failure(format!("json: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
