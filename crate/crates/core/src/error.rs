use thiserror::Error;

/// Failures raised by a [`PredictionProvider`](crate::kernel::PredictionProvider).
///
/// A provider error aborts the current run; the run result carries the
/// rendered message as its abort reason.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),

    #[error("request {id} timed out after {attempts} attempt(s)")]
    Timeout { id: u64, attempts: u32 },

    #[error("protocol violation: {reason}; payload: {payload}")]
    Protocol { reason: String, payload: String },

    #[error("remote error for request {id}: {message}")]
    Remote { id: u64, message: String },

    #[error("oracle error: {0}")]
    Oracle(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// An internal invariant was broken. Reaching this is a bug.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
