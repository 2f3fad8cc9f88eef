//! Error type shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("version error: {0}")]
    VersionError(String),
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigError(_) | Error::InvalidArgument(_) => 2,
            Error::ShapeMismatch(_)
            | Error::NotFound(_)
            | Error::EmptyDataset(_)
            | Error::InvalidDataset(_)
            | Error::Io(_)
            | Error::Image(_)
            | Error::Json(_) => 3,
            Error::NumericalDivergence(_) => 4,
            _ => 1,
        }
    }
}
