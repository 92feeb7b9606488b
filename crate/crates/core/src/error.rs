use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt mask: {0}")]
    CorruptMask(String),

    /// A pluggable component (denoiser, propagator, encoder) returned output
    /// that violates its declared shape contract.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
