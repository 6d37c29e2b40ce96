use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsdError {
    #[error("clip too short: {frames} {unit} available, {needed} needed")]
    ClipTooShort {
        frames: usize,
        needed: usize,
        unit: &'static str,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported audio in {path}: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("invalid {what} file: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("{0}")]
    State(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AsdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        AsdError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AsdError>;
