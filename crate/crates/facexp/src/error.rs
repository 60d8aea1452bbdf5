//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value contradicts the network spec or another setting.
    #[error("config: {0}")]
    Config(String),

    /// Invalid input data (bad shapes, out-of-range labels, malformed files).
    #[error("validation: {0}")]
    Validation(String),

    /// A loss term went non-finite during training.
    #[error("divergence: loss term `{term}` became non-finite at step {step}")]
    Divergence { term: String, step: u64 },

    /// Checkpoint file failed its integrity check.
    #[error("integrity: {0}")]
    Integrity(String),

    /// Checkpoint was written by an incompatible format version.
    #[error("version mismatch: file has format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code contract: 1 validation/config, 2 runtime/divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Json(_) => 1,
            Error::Divergence { .. } => 2,
            Error::Integrity(_) | Error::VersionMismatch { .. } => 2,
            Error::Io(_) | Error::Image(_) => 3,
        }
    }
}
