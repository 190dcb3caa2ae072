use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: u64 },

    #[error("training diverged at iteration {iteration}; last good checkpoint: {last_good}")]
    Diverged { iteration: u64, last_good: String },

    #[error("checkpoint mismatch on `{name}`: {reason}")]
    CheckpointMismatch { name: String, reason: String },

    #[error("bad container {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
