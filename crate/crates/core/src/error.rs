use thiserror::Error;

pub type Result<T, E = LedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LedError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("underdetermined: {0}")]
    Underdetermined(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("phase error: {0}")]
    Phase(String),
    #[error("no recorded graph: {0}")]
    NoGraph(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LedError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LedError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LedError::InvalidArgument(msg.into())
    }
}
