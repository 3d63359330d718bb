//! Experiment harness for meta-learned neighbor dictionaries.
//!
//! The `mnbr` binary is a thin layer over [`commands`]; everything it does
//! can also be driven from code, which is how the acceptance suite runs.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

pub use config::RunConfig;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<mnbr::Error> for CliError {
    fn from(e: mnbr::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
