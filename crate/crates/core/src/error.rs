use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value in {component}")]
    Numeric { component: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no hint available for sample `{0}`")]
    MissingHint(String),

    #[error("hint shape drift: {0}")]
    HintConsistency(String),

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("incompatible file {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
