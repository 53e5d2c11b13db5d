use std::path::PathBuf;

use thiserror::Error;

/// Rejected configuration values.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode (t = {t}, succeeded = {succeeded})")]
    EpisodeFinished { t: usize, succeeded: bool },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("action sample count must be at least 1")]
    ZeroSamples,
    #[error("empty batch")]
    EmptyBatch,
    #[error("inputs ({inputs}) and targets ({targets}) differ in length")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("empty training dataset")]
    EmptyDataset,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint schema version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("checkpoint dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TttError {
    #[error("action variance needs at least one sample")]
    NoSamples,
    #[error("quantile of an empty buffer")]
    EmptyBuffer,
    #[error("update requested on a partial batch ({len} of {required} pairs)")]
    PartialBatch { len: usize, required: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Ttt(#[from] TttError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization failed: {0}")]
    Serialize(String),
}
