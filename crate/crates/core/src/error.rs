use crate::numerics::NumericsError;

/// Which budget the allocator could not satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum BudgetConstraint {
    Latency,
    Memory,
    /// Each budget is individually attainable but no block split meets both.
    Joint,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("infeasible budget ({constraint:?}): best achievable {best:.3} exceeds limit {limit:.3}")]
    Infeasible { constraint: BudgetConstraint, best: f64, limit: f64 },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("streaming state mismatch: {0}")]
    StateMismatch(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing expert tuple: {0}")]
    MissingExpert(String),
    #[error("memory guard: {0}")]
    MemoryGuard(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
