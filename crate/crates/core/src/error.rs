use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("exhaustive search over {size} points exceeds the cap of {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("search budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("precondition unmet: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
