//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// A quantization site name is not in the model registry.
    #[error("unknown quantization site: {0}")]
    UnknownSite(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// A file did not parse as the expected format.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
