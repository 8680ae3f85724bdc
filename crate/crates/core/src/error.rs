use thiserror::Error;

/// Errors raised by the solvers, pipelines and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("coefficient bounds violated: {0}")]
    Admissibility(String),

    #[error("non-finite value at step {step} (t = {time}): {detail}")]
    NonFinite { step: usize, time: f64, detail: String },

    #[error("completion diverged after {iterations} iterations (residual {residual:.3e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("incomplete ray data: {0}")]
    Coverage(String),

    #[error("corrupt array file: {0}")]
    Corrupt(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
