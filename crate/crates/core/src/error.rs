use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
///
/// [`Error::is_input_error`] separates problems with the caller's inputs
/// (bad files, broken contracts) from internal failures; the CLI maps the
/// former to exit code 2 and the latter to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{context}: {message}")]
    Validation { context: String, message: String },

    #[error("{0}")]
    Contract(String),

    #[error("no categories to evaluate")]
    NoCategories,

    #[error("no evaluable images")]
    NoEvaluableImages,

    #[error("eigendecomposition failed: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn validation(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the inputs rather than by the toolkit itself.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Numeric(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
