use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} must be a positive multiple of {multiple} and at least {min}, got {got}")]
    Sizing { what: &'static str, multiple: usize, min: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ablation switches `{a}` and `{b}` cannot be combined: {reason}")]
    Ablation { a: &'static str, b: &'static str, reason: &'static str },

    #[error("spatial mismatch: {0}")]
    Shape(String),

    #[error("non-local block refused a {positions}-position feature (limit {limit})")]
    NonLocalTooLarge { positions: usize, limit: usize },

    #[error("data error at {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data { path: path.into(), msg: msg.into() }
    }
}
