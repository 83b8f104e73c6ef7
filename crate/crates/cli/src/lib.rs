//! Reproducible command-line runs over `peswap-core`: toy training, single
//! edits, tau ablations, the clone demo and the evaluation grid.

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<peswap_core::Error> for CliError {
    fn from(e: peswap_core::Error) -> Self {
        use peswap_core::Error as E;
        match e {
            E::Numerical(_) | E::Training(_) => CliError::Numerical(e.to_string()),
            E::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingArtifact(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
