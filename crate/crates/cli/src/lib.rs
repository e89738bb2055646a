//! Experiment runner: config parsing, runs, sweeps, reports and mask export.

pub mod config;
pub mod export;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Method};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book {}

/// Overrides the `output_dir` of every config.
pub const OUTPUT_ROOT_ENV: &str = "GFSS_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config or arguments (exit status 2).
    #[error("{0}")]
    Config(String),
    /// Nothing to report (exit status 2).
    #[error("{0}")]
    Empty(String),
    /// Failure while running (exit status 1).
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Empty(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<gfss::Error> for CliError {
    fn from(e: gfss::Error) -> Self {
        match e {
            gfss::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
