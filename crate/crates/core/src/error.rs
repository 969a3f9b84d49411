use thiserror::Error;

#[derive(Debug, Error)]
pub enum ElmmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch in {what}: expected {expected} bytes, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ElmmError>;

pub(crate) fn invalid(msg: impl Into<String>) -> ElmmError {
    ElmmError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> ElmmError {
    ElmmError::Shape(msg.into())
}
