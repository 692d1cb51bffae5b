//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input: shape mismatch, invalid range, malformed file contents.
    #[error("validation error: {0}")]
    Validation(String),

    /// The numeric state became unusable (non-finite loss, divergence).
    #[error("numeric error at iteration {iter}: {msg}")]
    Numeric { iter: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(iter: usize, msg: impl Into<String>) -> Self {
        Error::Numeric {
            iter,
            msg: msg.into(),
        }
    }

    /// Process exit code convention: 2 for bad inputs, 3 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }

    /// Short machine-readable kind tag for error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Numeric { .. } => "numeric",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
