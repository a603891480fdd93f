use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid base manifold: {0}")]
    InvalidBase(String),

    #[error("Kähler class is not integral: {0}")]
    NonIntegralClass(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("degree mismatch: expected {expected}, got {got}")]
    DegreeMismatch { expected: usize, got: usize },

    #[error("degree overflow: {0} exceeds the manifold dimension")]
    DegreeOverflow(usize),

    #[error("type index {index} out of range for degree {degree}")]
    TypeOutOfRange { index: usize, degree: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("metric is not positive definite at grid point {index} (min eigenvalue {min_eig:e})")]
    NotPositive { index: usize, min_eig: f64 },

    #[error("flow step unstable: {0}")]
    Unstable(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("parameter point on the boundary of the parameter grid: {0}")]
    BoundaryParameter(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositive { .. } | Error::Unstable(_) | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
