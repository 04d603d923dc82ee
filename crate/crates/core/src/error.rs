use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or layer-chaining problems: mismatched fan in/out, wrong input
    /// dimension, unsupported layer/loss pairing.
    #[error("structure error: {0}")]
    Structure(String),

    /// Invalid argument values (negative spread, empty batch, bad fraction).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A gradient or parameter became non-finite; the update was rejected.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    /// Dataset / checkpoint file format problems.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
