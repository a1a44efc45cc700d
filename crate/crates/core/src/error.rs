use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("I/O error at {path}: {msg}")]
    Io { path: PathBuf, msg: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("freeze violation: {0}")]
    Freeze(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Generation(_) | Error::Io { .. } | Error::Range(_) => 3,
            Error::Domain(_)
            | Error::Undefined(_)
            | Error::Numeric(_)
            | Error::Freeze(_)
            | Error::Oracle(_)
            | Error::Tensor(_) => 4,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
