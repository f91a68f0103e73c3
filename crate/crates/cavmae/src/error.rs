//! Error type for the workflow crate, with process exit-code mapping:
//! 0 success, 1 runtime failure, 2 usage/configuration error.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or bad configuration: unknown keys, unparsable values,
    /// missing required settings. Maps to exit code 2.
    #[error("usage error: {0}")]
    Usage(String),
    /// Anything that goes wrong while running a well-formed command: IO,
    /// format corruption, numeric failures. Maps to exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<cavmae_core::CoreError> for CliError {
    fn from(e: cavmae_core::CoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json error: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
