use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape { expected: Vec<usize>, found: Vec<usize> },

    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("grammar error at token {index}: {reason}")]
    Grammar { index: usize, reason: String },

    #[error("requested {requested} subjects but the signature space holds only {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("sampler aborted at step {step}: denoiser returned non-finite values")]
    SamplerAbort { step: usize },

    #[error("expert for subject {subject} failed: {source}")]
    Expert {
        subject: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("parameter flavor mismatch: expected {expected}, found {found}")]
    Flavor { expected: &'static str, found: &'static str },

    #[error("{count} demonstrations given, at most {max} allowed")]
    TooManyDemos { count: usize, max: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path} (safe to retry once the path is writable): {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation failed: {invariant}: {detail}")]
    Validation { invariant: String, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("pipeline halted after {batches} batches")]
    Halted { batches: usize },

    #[error("injected fault: {0}")]
    Injected(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub(crate) fn validation(invariant: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation { invariant: invariant.into(), detail: detail.into() }
    }

    pub(crate) fn range(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Range { what, detail: detail.into() }
    }
}
