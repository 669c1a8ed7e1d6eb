use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("singular system (det = {det:e})")]
    Singular { det: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("variance is undefined for a mini-batch of {0} sample(s)")]
    VarianceUndefined(usize),
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parameter count {count} exceeds the per-sample materialization ceiling {ceiling}")]
    CeilingExceeded { count: usize, ceiling: usize },
    #[error("training diverged at step {step}: loss {loss:e} (initial {initial:e})")]
    Divergence { step: u64, loss: f64, initial: f64 },
    #[error("{}: bad magic number {found:#010x} (expected {expected:#010x})", .path.display())]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: truncated file ({detail})", .path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("{0}")]
    Format(String),
    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
