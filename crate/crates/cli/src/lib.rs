//! Experiment harness: configuration, training runs with checkpoints and
//! resume, checkpoint evaluation, and plot-data export.

pub mod config;
pub mod plot;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ConfigError, Dtype, RunConfig, StageSel};
pub use run::{evaluate_checkpoint, resume, train, EvalReport, RunManifest};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Core(#[from] commformer_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl HarnessError {
    /// 2 for bad configuration, 3 for a missing checkpoint, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingCheckpoint(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| Self::Json { path, source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
