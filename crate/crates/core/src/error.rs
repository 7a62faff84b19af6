use std::path::PathBuf;

use cascade_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Malformed Netpbm data.
    #[error("{path}: parse error at byte {offset}: {detail}")]
    Image { path: String, offset: usize, detail: String },

    /// Malformed line in a manifest or config file (1-based line number).
    #[error("{path}:{line}: parse error: {detail}")]
    Line { path: String, line: usize, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    /// Template or window has zero energy, so the match score is undefined.
    #[error("degenerate match: {0}")]
    DegenerateMatch(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
