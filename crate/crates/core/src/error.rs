//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {context} (layer {layer})")]
    Numeric { context: String, layer: usize },

    #[error("problem size {size} exceeds cap {cap} for {what}")]
    SizeCap {
        what: String,
        size: usize,
        cap: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("nonpositive value at index {index} in log-log fit: {value}")]
    NonPositive { index: usize, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code convention: 1 config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArch(_) | Error::Config(_) => 1,
            Error::Format { .. } | Error::Io { .. } | Error::EmptySplit(_) => 2,
            Error::Shape(_)
            | Error::Numeric { .. }
            | Error::SizeCap { .. }
            | Error::NonPositive { .. } => 3,
        }
    }
}
