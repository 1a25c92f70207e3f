use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },
    #[error("modality mismatch: model expects {expected}, got {got}")]
    ModalityMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error("checksum mismatch: bundle was trained on {expected}, base field is {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

/// Reports a domain error raised inside a training step, which can only
/// come from non-finite values, as a numerical failure at that step.
pub(crate) fn at_step<E: Into<Error>>(step: usize) -> impl FnOnce(E) -> Error {
    move |e| match e.into() {
        Error::Diff(DiffError::Domain { op, detail }) => Error::Numerical {
            step,
            detail: format!("{op}: {detail}"),
        },
        Error::NonFinite(detail) => Error::Numerical { step, detail },
        e => e,
    }
}

/// Lets closures handed to the gradient checker use `?` on crate results.
impl From<Error> for DiffError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diff(d) => d,
            other => DiffError::InvalidArgument(other.to_string()),
        }
    }
}
