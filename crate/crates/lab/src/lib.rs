//! Experiment orchestration around `mbl-core`: configuration files, dataset
//! and checkpoint IO, the full run matrix, and report rendering.

pub mod config;
pub mod io;
pub mod render;
pub mod runner;

use std::path::PathBuf;

/// Errors for the IO/orchestration layer. Mapped to process exit codes by
/// the CLI: validation 1, runtime 2, partial failure 3.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}:{line}: {source}")]
    ParseAt {
        path: PathBuf,
        line: usize,
        source: mbl_core::Error,
    },
    #[error(transparent)]
    Core(#[from] mbl_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{failed} of {total} experiment cells failed")]
    PartialFailure { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_) => 1,
            LabError::PartialFailure { .. } => 3,
            _ => 2,
        }
    }
}
