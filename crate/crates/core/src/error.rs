use std::path::PathBuf;

use clsp_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClspError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("unknown state item {0:?}")]
    UnknownItem(String),

    #[error("schema violation in {field}: {reason}")]
    SchemaViolation { field: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty token sequence for text {0:?}")]
    EmptyTokens(String),

    #[error("{0}: width mismatch, expected {1}, got {2}")]
    WidthMismatch(&'static str, usize, usize),

    #[error("{path}: line {line}: {reason}")]
    Dataset {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("checkpoint format version {found} is not supported by this loader (version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint schema hash {found} does not match loader schema {expected}")]
    SchemaHash { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ClspError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClspError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClspError>;
