use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),

    #[error("invalid group index {index} (loss has {groups} groups)")]
    InvalidGroup { index: usize, groups: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid loss: {0}")]
    InvalidLoss(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite iterate at step {step}")]
    NonFinite { step: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-positive gradient variance at theta = {theta}")]
    NonPositiveVariance { theta: f64 },

    #[error("normalization failed: {0}")]
    Normalization(String),

    #[error("quadrature did not converge on [{a}, {b}]")]
    Quadrature { a: f64, b: f64 },

    #[error("singular integral: {0}")]
    Singular(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("empty sample set: {0}")]
    Empty(String),

    #[error("singular linear system")]
    SingularSystem,

    #[error("zero behavior probability for action {action} in state {state}")]
    ZeroBehaviorProbability { state: usize, action: i32 },
}

impl Error {
    /// True for failures of the numerics (divergence, singularities) as opposed
    /// to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonPositiveVariance { .. }
                | Error::Normalization(_)
                | Error::Quadrature { .. }
                | Error::Singular(_)
                | Error::SingularSystem
        )
    }
}
