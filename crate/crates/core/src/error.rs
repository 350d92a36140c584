use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("sequence too short: need at least {needed} frames, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("code index {index} outside vocabulary of size {vocab}")]
    Vocabulary { index: usize, vocab: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),

    #[error("another stage holds the lock {0} (delete it if no run is active)")]
    Locked(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
