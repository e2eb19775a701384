use std::path::PathBuf;

/// Errors shared across the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operation requires a torus-domain field, got a box-domain field")]
    InvalidDomain,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    #[error("solver failed to converge: {0}")]
    SolverStalled(String),

    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr {lr:.3e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
