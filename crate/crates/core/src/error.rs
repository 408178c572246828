use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Usage` exits 2, everything else exits 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: byte {offset}: {msg}")]
    ImageFormat {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("model file corrupt: checksum mismatch")]
    Checksum,

    #[error("model method mismatch: expected {expected}, file contains {found}")]
    MethodTag {
        expected: &'static str,
        found: String,
    },

    #[error("model format: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
