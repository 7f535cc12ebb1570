use std::path::PathBuf;

/// Errors produced by the numerical core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },

    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },

    #[error("precision is not positive definite; most negative eigenvalue {min_eigenvalue:e}")]
    IndefinitePrecision { min_eigenvalue: f64 },

    #[error("symmetric eigendecomposition did not converge after {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },

    #[error("retained eigenvalue {value:e} is degenerate")]
    DegenerateEigenvalue { value: f64 },

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("non-finite result in {0}")]
    NonFiniteResult(&'static str),

    #[error("parameter count {count} exceeds the dense Hessian cap {cap}")]
    SizeCapExceeded { count: usize, cap: usize },

    #[error("total predictive variance at index {index} is not positive")]
    ZeroVariance { index: usize },

    #[error("objective became non-finite at step {step}")]
    NonFiniteObjective { step: usize },

    #[error("prediction shift {delta:e} is below the optimizer noise floor {floor:e}; increase lambda")]
    SignalBelowNoise { delta: f64, floor: f64 },

    #[error("operation requires a Gaussian likelihood")]
    UnsupportedLikelihood,

    #[error("operation requires a Gaussian prior")]
    UnsupportedPrior,

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the numerical procedures themselves, as opposed
    /// to malformed input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::IndefinitePrecision { .. }
                | Error::ConvergenceFailure { .. }
                | Error::DegenerateEigenvalue { .. }
                | Error::NonFiniteResult(_)
                | Error::NonFiniteObjective { .. }
                | Error::SignalBelowNoise { .. }
                | Error::ZeroVariance { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
