use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error at {}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}
pub(crate) use arg_err;
pub(crate) use dim_err;
