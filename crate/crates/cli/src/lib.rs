//! Experiment orchestration for the positioning simulator: configuration
//! loading, the five pipeline subcommands, and deterministic artifact export.

use std::fmt;

pub mod artifacts;
pub mod config;
pub mod runner;

/// CLI-level error split by exit code: validation problems exit 1, runtime
/// failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Core errors raised while *building* a configuration are user input
    /// problems, not runtime failures.
    pub fn from_validation(e: holopos_core::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "validation error: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<holopos_core::Error> for CliError {
    fn from(e: holopos_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}
