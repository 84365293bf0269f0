//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An argument outside its documented range, named by key.
    #[error("invalid argument `{key}`: {reason}")]
    InvalidArgument { key: String, reason: String },

    /// A config file failed validation; `key` is the offending field.
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// A config file failed to parse at all.
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// A binary input did not match its documented layout.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Two inputs that must agree do not.
    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite or absurdly large model.
    #[error("model diverged at round {round}: {reason}")]
    Divergence { round: u64, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub fn invalid_argument(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
