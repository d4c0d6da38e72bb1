//! Command failures and their process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or malformed input files.
    #[error("{0}")]
    Input(String),
    /// A volume could not be standardized.
    #[error("{0}")]
    Pipeline(String),
    /// Folds could not be formed.
    #[error("{0}")]
    Split(String),
    /// Invalid configuration or parameters.
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
            CliError::Split(_) => 4,
            CliError::Config(_) => 5,
        }
    }
}

impl From<ctqc::harness::HarnessError> for CliError {
    fn from(e: ctqc::harness::HarnessError) -> Self {
        use ctqc::harness::HarnessError as H;
        match e {
            H::Split(_) => CliError::Split(e.to_string()),
            H::Loss(_) | H::InvalidConfig(_) | H::ConfigMismatch(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
