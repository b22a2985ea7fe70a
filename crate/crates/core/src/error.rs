//! Crate-wide error type with a stable mapping to CLI exit codes.

/// Result alias used across the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension disagreement between tensors / images / scenes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity surfaced in a numeric kernel.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training loss ran away past the divergence guard.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Malformed or unsupported on-disk data (PLY, checkpoint, feature file, PNG).
    #[error("format error: {0}")]
    Format(String),

    /// Bad configuration or invalid argument values.
    #[error("invalid config: {0}")]
    Config(String),

    /// Preconditions of an operation were violated by the caller.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code contract: 0 success, 2 validation/config errors,
    /// 3 numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Diverged(_) => 3,
            _ => 2,
        }
    }
}
