//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between arrays or configs.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A model was used before it was trained or loaded.
    #[error("model not trained: {0}")]
    Untrained(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {term} is not finite")]
    Diverged { step: u64, term: String },

    /// Container decode failure (bad magic, version, truncation, checksum).
    #[error("container error: {0}")]
    Container(String),

    /// Checkpoint is incompatible with the requested operation.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}
