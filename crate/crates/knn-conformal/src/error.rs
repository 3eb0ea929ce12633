use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so the CLI can map them onto stable exit codes:
/// usage/config problems (exit 2), data problems (exit 3), and numerical
/// failures (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing label on {split} instance `{id}`")]
    MissingLabel { id: String, split: &'static str },

    #[error("missing logits on {split} instance `{id}`")]
    MissingLogits { id: String, split: &'static str },

    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code for this error class (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::InvalidConfig(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
