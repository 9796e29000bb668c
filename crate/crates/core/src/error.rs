use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("response space has {size} sequences, above the enumeration cap of {cap}")]
    EnumerationTooLarge { size: u128, cap: u64 },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("token {token} is not a regular token of a vocabulary with {vocab_size} tokens")]
    InvalidToken { token: u32, vocab_size: u32 },

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch { what: String, expected: usize, got: usize },

    #[error("configuration error for `{kind}`: {reason}")]
    Config { kind: String, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(kind: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            kind: kind.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
