use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv header is missing column `{0}`")]
    MissingColumn(String),

    #[error("trajectory too short: need at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("degenerate variance in channel `{0}`; cannot normalize")]
    DegenerateVariance(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ATM stack too shallow: depth {depth} < minimum {min}")]
    StackTooShallow { depth: usize, min: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
