//! Experiment driver for neural auction mechanisms.
//!
//! The `mechnet` binary trains networks from TOML run configurations, scores
//! checkpoints, probes one network with another's misreports, distills
//! between architectures, simulates the analytic baselines and renders
//! allocation heatmaps. Everything here is also callable as a library through
//! [`run`], which is what the binary does.
//!
//! Two environment variables are honoured: `MECHNET_OUTPUT_DIR` overrides the
//! configured output directory and `MECHNET_THREADS` sets the default worker
//! count. Neither changes any result.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod heatmap;
pub mod metrics;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{run, run_with_output};

/// Exit status of a malformed command line.
pub const EXIT_USAGE: i32 = 2;
/// Exit status of any other failure.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: checkpoint::CheckpointError,
    },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Mechanism(#[from] mechnet::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn csv(path: &Path, err: csv::Error) -> Self {
        CliError::Format(format!("{}: {err}", path.display()))
    }

    /// Short machine-readable class of the error.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Io { .. } => "io",
            CliError::Format(_) => "format",
            CliError::Unsupported(_) => "unsupported",
            CliError::Mechanism(_) => "mechanism",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }

    /// `error[<kind>]: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.kind())
    }
}
