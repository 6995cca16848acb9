use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("not a PNG file: {0}")]
    NotPng(PathBuf),

    #[error("unsupported PNG format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("failed to decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("failed to encode {path}: {detail}")]
    Encode { path: PathBuf, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at step {step}: term `{term}` = {value}")]
    NonFinite { step: usize, term: String, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
