use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("code index {index} out of range for a codebook of {k} entries")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("cannot load scene {}: {reason}", path.display())]
    SceneLoad { path: PathBuf, reason: String },

    #[error("incompatible checkpoint {}: {reason}", path.display())]
    IncompatibleCheckpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (input classes {classes:?}): {breakdown}")]
    NonFiniteLoss {
        step: usize,
        classes: Vec<u8>,
        breakdown: String,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
