use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer extents that do not fit together.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value outside its documented domain (labels, rates, counts).
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation invoked on something it does not apply to.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    /// Requested split sizes exceed what a class can provide.
    #[error("sizing error: class {class} needs {required} samples but only {available} are available (deficit {})", required - available)]
    Sizing {
        class: String,
        required: usize,
        available: usize,
    },

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration rather than by data on disk.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Validation(_)
        )
    }
}
