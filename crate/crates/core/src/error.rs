use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside its allowed range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes or dimensions disagree between two components that must agree.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds the model maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token {token} does not causally follow the image span ending at {image_end}")]
    Precondition { token: usize, image_end: usize },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
