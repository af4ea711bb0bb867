use std::path::PathBuf;

use crate::adapter::LayerKey;

/// Errors produced by the merging engine and its supporting modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("layer {0} not present in adapter")]
    KeyNotFound(LayerKey),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("incompatible adapters: {0}")]
    IncompatibleAdapters(String),

    #[error("adapter store is empty")]
    EmptyStore,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("history count must be >= 1, got {0}")]
    InvalidHistoryCount(usize),

    #[error("insufficient inputs: {0}")]
    InsufficientInputs(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("task `{0}` has already been ingested")]
    DuplicateTask(String),

    #[error("task index {0} has never been ingested")]
    UnknownTask(usize),

    #[error("slot {0} is vacant")]
    SlotVacant(u64),

    #[error("restore failed at `{field}`: {message}")]
    Restore { field: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn restore(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Restore {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
