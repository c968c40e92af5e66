use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (routing, regime/mode pairing, heads, groups).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite activations or gradients, negative variances.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Violated operation precondition (empty batch, length mismatch).
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed checkpoint, dataset, or config file.
    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch for blob `{0}`")]
    Checksum(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
