use std::collections::BTreeMap;
use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on the inputs was violated.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("ingestion error in {}: {message}", path.display())]
    Ingestion { path: PathBuf, message: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, step {step}: {components:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        components: BTreeMap<String, f64>,
    },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.into(),
        message: msg.into(),
    }
}
