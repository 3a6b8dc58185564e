use std::io;

use thiserror::Error;

/// Errors produced across the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("all {0} workers failed")]
    AllWorkersFailed(usize),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reasons a checkpoint cannot be decoded.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn config_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_owned(),
        message: msg.into(),
    }
}
