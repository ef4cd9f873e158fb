use thiserror::Error;

#[derive(Debug, Error)]
pub enum DamdaError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("augmented covariance is invalid: Schur complement is not positive definite")]
    InvalidAugmentedCovariance,

    #[error("class {class} has {count} observation(s); at least 2 are required")]
    DegenerateClass { class: usize, count: usize },

    #[error("no covariance structure could be fitted: {0}")]
    AllStructuresSingular(String),

    #[error("non-finite density at row {row}")]
    NonFiniteDensity { row: usize },

    #[error("component {component} collapsed (effective size {size:.3e})")]
    ComponentCollapse { component: usize, size: f64 },

    #[error("every fit failed: {}", .0.join("; "))]
    AllFitsFailed(Vec<String>),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("missing columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DamdaError>;
