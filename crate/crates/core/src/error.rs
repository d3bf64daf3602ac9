use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("truncated record at byte offset {offset} (record size {record_size})")]
    Truncated { offset: usize, record_size: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("sampler diverged at level {level}, step {step}: {detail}")]
    Diverged {
        level: usize,
        step: usize,
        detail: String,
    },

    #[error("training loss became non-finite at step {step} (level {level}, last finite loss {last_loss})")]
    NanLoss {
        step: usize,
        level: usize,
        last_loss: f64,
    },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
