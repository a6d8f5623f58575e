use thiserror::Error;

#[derive(Debug, Error)]
pub enum OplError {
    /// Invalid configuration (bad counts, empty datasets, incompatible pairings).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-side contract was violated (dimension mismatch, non-simplex input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric failure surfaced from inside a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation requires a discrete-context environment.
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    /// Division by a zero propensity at a specific record.
    #[error("zero propensity at record {record}: {detail}")]
    ZeroPropensity { record: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OplError>;
