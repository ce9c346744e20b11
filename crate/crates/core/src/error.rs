use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rule set: {0}")]
    InvalidRules(String),

    #[error("invalid neighborhood: {0}")]
    InvalidNeighborhood(String),

    #[error("frame failed validation with {} issue(s); first: {}", .0.len(), .0.first().map(|i| i.to_string()).unwrap_or_default())]
    InvalidFrame(Vec<crate::model::ValidationIssue>),

    #[error("unreadable input at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("distance matrix is not symmetric or contains non-finite values")]
    BadDistanceMatrix,

    #[error("balancing-weight problem is infeasible; violated constraints: {violated:?}")]
    Infeasible { violated: Vec<String>, max_violation: f64 },

    #[error("no candidate neighborhood passed the balance tests")]
    NoPassingNeighborhood,

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
