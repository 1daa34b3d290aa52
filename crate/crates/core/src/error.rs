use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("matrix is not positive definite after ridge {ridge:e}; retry with a larger ridge")]
    NotPositiveDefinite { ridge: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged: {0}; try lowering the learning rate")]
    Diverged(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by the filesystem or a malformed file.
    pub fn is_io_or_format(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. })
    }
}
