//! Library side of the `dfl` command: configuration, data loading and the
//! subcommand implementations.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_WARNING: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_METRIC: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}; last finite parameters saved to {}", checkpoint.display())]
    Diverged {
        epoch: usize,
        step: usize,
        checkpoint: PathBuf,
    },

    #[error(transparent)]
    Core(#[from] dfl_core::Error),

    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use dfl_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Write { .. } | CliError::Json(_) => EXIT_CONFIG,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::NonFinite(_) => EXIT_DIVERGED,
                E::MetricUndefined(_) | E::InsufficientSamples(_) => EXIT_METRIC,
                _ => EXIT_CONFIG,
            },
        }
    }
}
