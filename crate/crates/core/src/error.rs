use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or generator spec violates one of its invariants.
    #[error("invalid specification: field `{field}`: {reason}")]
    Spec { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("feature undefined: {0}")]
    FeatureUndefined(String),

    /// A cross-module contract was broken (e.g. the frozen backbone changed).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn spec(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Spec {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than broken internal contracts.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Contract(_) | Error::Numerical(_))
    }
}

pub(crate) fn ensure_same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{what}: shapes {a:?} and {b:?} differ"
        )));
    }
    Ok(())
}
