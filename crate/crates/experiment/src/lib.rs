//! End-to-end experiment pipeline for learned robust hybrid barrier functions.
//!
//! Each stage reads a TOML [`config::ExperimentConfig`], writes its artifacts
//! under the configured output directory, and stamps them with a hash of the
//! settings that produced them.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod sweep;

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] rhcbf::Error),
    #[error("{artifact} was produced by config {found}, current config is {expected}; rerun the stage or pass --force")]
    HashMismatch { artifact: String, expected: String, found: String },
    #[error("missing artifact {0}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

impl ExpError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExpError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, ExpError>;

/// Refuses `found` unless it equals `expected` or `force` is set.
pub fn check_hash(artifact: &Path, expected: &str, found: &str, force: bool) -> Result<()> {
    if force || expected == found {
        return Ok(());
    }
    Err(ExpError::HashMismatch {
        artifact: artifact.display().to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    })
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| ExpError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(ExpError::Missing(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))
}
