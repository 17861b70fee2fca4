use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch norm running statistics are uninitialized; run a train-mode forward first")]
    UninitializedStatistics,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("unknown block id {0}")]
    UnknownBlock(u8),

    #[error("unknown protocol `{0}` (expected baseline, naive, freeze_encoder, hier_freeze or hier_unfreeze)")]
    UnknownProtocol(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("lesion does not fit inside the liver after {0} attempts")]
    LesionPlacement(usize),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: format version {found} is incompatible with supported version {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
