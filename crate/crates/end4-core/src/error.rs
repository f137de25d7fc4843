//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (bad range, odd dimension, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A time-step or array index was out of range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Input data is missing or malformed (images, annotations, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A manifest or config failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Manifest records violated their invariants; lists offending ids.
    #[error("manifest validation failed for ids: {ids:?}")]
    ManifestInvalid { ids: Vec<String> },

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training aborted on a non-finite loss; carries the batch ids for diagnosis.
    #[error("non-finite loss at step {step}; batch ids: {ids:?}")]
    NonFiniteLoss { step: u64, ids: Vec<String> },

    /// Run configuration is unusable (empty manifest, missing paths, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A remote backend request failed after retries.
    #[error("transport error: {0}")]
    Transport(String),

    /// A remote backend replied with something we cannot parse.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// AUC is undefined because the score set contains a single class.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for validation-class errors, 2 for
    /// runtime/transport-class errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::Validation(_)
            | Error::ManifestInvalid { .. }
            | Error::Config(_) => 1,
            _ => 2,
        }
    }
}
