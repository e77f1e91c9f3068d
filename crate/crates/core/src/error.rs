use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PclError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PclError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error in {file} at line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("load error: {0}")]
    Load(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PclError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PclError::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, PclError::Config(_) | PclError::Parse { .. })
            || matches!(self, PclError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::PclError::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
