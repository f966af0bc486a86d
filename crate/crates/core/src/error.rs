//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by feature extraction, the autodiff engine, training,
/// and the file formats.
#[derive(Error, Debug)]
pub enum Error {
    #[error("empty clip")]
    EmptyClip,

    #[error("clip too short: {samples} samples, need at least {window}")]
    ClipTooShort { samples: usize, window: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Data-format error with a file path and line number attached.
    pub fn data_at(path: impl AsRef<std::path::Path>, line: usize, msg: impl AsRef<str>) -> Self {
        Error::Data(format!(
            "{}:{line}: {}",
            path.as_ref().display(),
            msg.as_ref()
        ))
    }

    pub fn file(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::File {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
