use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("degenerate input: {what} {index} has norm below the floor")]
    Degenerate { what: &'static str, index: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value produced for `{name}` (flat index {index})")]
    NonFinite { name: String, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed for instance {instance}, field `{field}`: {message}")]
    Validation {
        instance: usize,
        field: String,
        message: String,
    },

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad format: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated input: {0}")]
    Length(String),

    #[error("checksum mismatch")]
    Checksum,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
