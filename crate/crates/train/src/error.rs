use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] zebra_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("dataset {path}: {message} (byte offset {offset})")]
    Data { path: PathBuf, offset: u64, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error("topology: {0}")]
    Topology(String),

    #[error("checkpoint is not folded for inference; fold it first")]
    Unfolded,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("pruning: {0}")]
    Pruning(String),
}

impl TrainError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io { path: path.into(), source }
    }
}
