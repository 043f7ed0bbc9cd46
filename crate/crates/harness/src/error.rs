//! Command failures and their exit codes.

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or flags. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Unreadable or malformed input, or unwritable output. Exit code 3.
    #[error("input error: {0}")]
    Input(String),
    /// The request exceeds what this build will compute. Exit code 4.
    #[error("capability error: {0}")]
    Capability(String),
    /// Hard invariants failed during `verify`. Exit code 1.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Capability(_) => 4,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ear_core::Error> for CliError {
    fn from(e: ear_core::Error) -> Self {
        match e {
            ear_core::Error::OracleLimit(msg) => CliError::Capability(format!(
                "exact knapsack refused ({msg}); use a greedy policy"
            )),
            ear_core::Error::InvalidClusterCount { .. } | ear_core::Error::InvalidParameter(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}
