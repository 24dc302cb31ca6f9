//! Command implementations behind the `ppn` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Exit code 2 for bad input, 3 for failures while running.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ppn_core::Error> for CliError {
    fn from(e: ppn_core::Error) -> Self {
        match e {
            ppn_core::Error::Divergence { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}
