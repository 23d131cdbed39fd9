use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or image sizes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical routine produced or would produce a non-finite result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Input data is well-formed but semantically invalid (e.g. a
    /// non-rotation extrinsic matrix).
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
