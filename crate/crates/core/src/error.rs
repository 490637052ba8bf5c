use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("integration diverged at t = {t} (non-finite state)")]
    IntegrationDiverged { t: f64 },

    #[error("invalid assumption: {0}")]
    InvalidAssumption(String),

    #[error("generator is not irreducible: {0}")]
    Reducible(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("jump-rate bound violated: observed total rate {observed} exceeds declared bound {bound}")]
    BoundViolation { observed: f64, bound: f64 },

    #[error("double root: discriminant (alpha + b)^2 - 4 p alpha b = {discriminant} is not positive")]
    DoubleRoot { discriminant: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time {t} is outside the simulated range [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn assumption(msg: impl Into<String>) -> Self {
        Error::InvalidAssumption(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::IntegrationDiverged { .. } | Error::Numeric(_) | Error::DoubleRoot { .. }
        )
    }
}
