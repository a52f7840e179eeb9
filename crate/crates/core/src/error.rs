use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown cost function `{0}`")]
    UnknownCost(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rate vector is empty")]
    EmptyRates,
    #[error("rate at index {0} is zero")]
    ZeroRate(usize),
    #[error("relative amplitude at index {0} is zero")]
    ZeroAmplitude(usize),
    #[error("relative amplitudes are not normalized (sum of squares {0})")]
    NotNormalized(f64),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("dither rates fail {order} admissibility with {violations} violation(s)")]
    InadmissibleRates { order: &'static str, violations: usize },
    #[error("matrix is not symmetric (max deviation {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("cost `{0}` has no analytic gradient")]
    MissingGradient(String),
    #[error("cost `{0}` has no analytic Hessian")]
    MissingHessian(String),
    #[error("cost `{0}` is not homogeneous; growth bounds do not exist")]
    NonHomogeneous(String),
    #[error("growth bounds unavailable: {0}")]
    GrowthBounds(String),
    #[error("quadrature did not converge after {doublings} doublings (last change {change:e})")]
    QuadratureNotConverged { doublings: u32, change: f64 },
    #[error("non-finite vector field evaluation at t = {time}")]
    NonFinite { time: f64 },
    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
