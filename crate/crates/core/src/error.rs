use thiserror::Error;

/// Errors produced by model construction, covariance recursions and filters.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum IskfError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("measurement noise covariance V = G G^T is not positive definite")]
    SingularMeasurementNoise,

    #[error("innovation covariance C P C^T + V is not positive definite")]
    SingularInnovationCovariance,

    #[error("prior covariance is not positive definite")]
    SingularPriorCovariance,

    #[error("scaling matrix is not positive definite")]
    SingularScalingMatrix,

    #[error("iteration did not converge within {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input")]
    EmptyInput,
}

pub type Result<T> = std::result::Result<T, IskfError>;

pub(crate) fn check_dims(
    what: &str,
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(IskfError::DimensionMismatch(format!(
            "{what}: expected {}x{}, found {}x{}",
            expected.0, expected.1, found.0, found.1
        )))
    }
}
