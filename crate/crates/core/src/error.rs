use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("corrupt pooling indices: {0}")]
    Corruption(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
