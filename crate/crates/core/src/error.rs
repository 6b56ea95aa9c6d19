use std::path::PathBuf;

/// Errors surfaced by the library. Each variant maps onto one CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, including tensor shape mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or missing input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss or gradient.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// API misuse, e.g. a second backward pass on the same tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Config(format!("{op}: incompatible shapes {lhs:?} and {rhs:?}"))
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 data, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
