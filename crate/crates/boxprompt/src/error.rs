//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the boxprompt library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A box annotation violates its invariants for the given image.
    #[error("invalid box: {0}")]
    Box(String),

    /// Tensor or mask shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation that this backbone cannot perform (e.g. decoding through
    /// a file-based adapter that only serves exported records).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A loss or gradient came out non-finite; the message carries the
    /// per-term dump so the offending component can be identified.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    /// A cached record no longer matches the data it was computed from.
    #[error("stale cache: {0}")]
    StaleCache(String),

    /// A binary record (cache entry, checkpoint, volume) failed validation.
    #[error("corrupt record: {0}")]
    Corrupt(String),

    /// A dataset manifest is malformed or inconsistent.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A checkpoint does not match the generator configuration it is being
    /// loaded into, or fails its integrity checks.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
