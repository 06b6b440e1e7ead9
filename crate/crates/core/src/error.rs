//! Crate-wide error type.

use thiserror::Error;

use crate::orchestrate::OrchestrationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file or payload did not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// An operation received an empty input it cannot work with.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A trace is shorter than the requested analysis window.
    #[error("trace too short: {0}")]
    TooShort(String),

    /// A chunk queued for export has no label.
    #[error("missing label for chunk {0}")]
    MissingLabel(String),

    /// An argument is outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or grid dimensions do not chain.
    #[error("shape error: {0}")]
    Shape(String),

    /// The heart-rate detector found fewer than two beats.
    #[error("no beats detected")]
    NoBeatsDetected,

    /// A metric is undefined for the given input (e.g. single-class ROC).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// One or more orchestration activities exhausted their retries.
    /// The report carries every chunk that did succeed.
    #[error("partial failure: chunks {failed:?} exhausted retries")]
    PartialFailure {
        failed: Vec<usize>,
        report: Box<OrchestrationReport>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
