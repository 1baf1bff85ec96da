use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or settings supplied by the caller's configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data (image dimensions, malformed files, empty sets).
    #[error("input error: {0}")]
    Input(String),

    /// NaN or infinity produced by a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Corrupt or mismatched artifact (CRC failure, config hash mismatch).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Violation of the misregistration protocol, e.g. a ground-truth box
    /// outside the retained image support.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("malformed annotation file {path}: {reason}")]
    Annotation { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use input_err;
