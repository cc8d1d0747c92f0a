use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("task spec error: {0}")]
    Spec(String),

    #[error("format error in {record}: {reason}")]
    Format { record: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {part} loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        part: &'static str,
    },

    #[error("unknown ablation variant {name:?}; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            record: record.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
