//! Experiment runs: configuration, backend wiring, checkpointed pipeline
//! loops, metric export and the command-line front end.

pub mod cli;
pub mod config;
pub mod export;
pub mod run;

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lm_backend::BackendError;
use crate::pipelines::PipelineError;
use crate::value_ops::ValueOpsError;

pub use self::cli::{cli_run, replay_verify};
pub use self::config::{BackendSource, BackendSpec, ConfigError, RawConfig, RunConfig, RunMode, PROFILES};
pub use self::export::{export_metrics, MetricsRow, METRICS_FILE};
pub use self::run::{label_states, run_experiment, LabelSplit, RunSummary, RESOLVED_CONFIG};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Io(String),
    #[error("no completed iterations under {0}")]
    EmptyRun(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Backend(BackendError::Config(_)) => EXIT_CONFIG,
            HarnessError::Backend(_) => EXIT_BACKEND,
            HarnessError::Pipeline(e) => match e {
                PipelineError::Config(_) | PipelineError::Prompt(_) => EXIT_CONFIG,
                PipelineError::Ops(ValueOpsError::Prompt(_)) => EXIT_CONFIG,
                PipelineError::Backend(BackendError::Config(_)) => EXIT_CONFIG,
                PipelineError::Io(_) | PipelineError::Trace(_) => EXIT_FAILURE,
                _ => EXIT_BACKEND,
            },
            HarnessError::Io(_) | HarnessError::EmptyRun(_) | HarnessError::Verify(_) => EXIT_FAILURE,
        }
    }
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// SHA-256 over every file below `dir` (relative path and contents, in path
/// order), skipping the `cache` directory and the resolved config.
pub fn tree_digest(dir: &Path) -> Result<String, HarnessError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(dir.join(&rel)).map_err(|e| io_err(&dir.join(&rel), e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), HarnessError> {
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        let rel = path
            .strip_prefix(root)
            .expect("entry lies under root")
            .to_string_lossy()
            .replace('\\', "/");
        if path.is_dir() {
            if rel != "cache" {
                collect_files(root, &path, out)?;
            }
        } else if rel != RESOLVED_CONFIG {
            out.push(rel);
        }
    }
    Ok(())
}
