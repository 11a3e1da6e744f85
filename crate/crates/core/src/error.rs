use thiserror::Error;

/// Errors raised by ingestion, fitting, matching and estimation.
#[derive(Debug, Error)]
pub enum DsmError {
    /// A configured column is absent from the data, or the configuration
    /// itself is malformed.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Input violates a domain precondition (empty arm, too few donors, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("column {index} has zero variance")]
    DegenerateColumn { index: usize },

    #[error("design is rank deficient; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DsmError {
    /// Coarse classification used by the command-line driver.
    pub fn kind(&self) -> ErrorKind {
        match self {
            DsmError::Schema(_) | DsmError::Config(_) => ErrorKind::Config,
            DsmError::Parse { .. } | DsmError::Domain(_) | DsmError::Io(_) => ErrorKind::Data,
            DsmError::DegenerateColumn { .. }
            | DsmError::RankDeficient { .. }
            | DsmError::Dimension { .. }
            | DsmError::NonFinite(_)
            | DsmError::Numerical(_) => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

pub type Result<T, E = DsmError> = std::result::Result<T, E>;
