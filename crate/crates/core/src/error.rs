use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Structure(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: u64, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
