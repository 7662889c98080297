//! Crate-wide error type.

/// Errors produced by operators, solvers and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("solver diverged: {0}")]
    Diverged(String),
    #[error("conjugate gradient failed: {0}")]
    CgFailure(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
