use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariance is not strictly positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    SingularCovariance { min_eigenvalue: f64 },

    #[error("marginal covariance at t = {t} is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularMarginal { t: f64, min_eigenvalue: f64 },

    #[error("affine field is not a flow-matching initial velocity for these endpoints (constant-term mismatch {mismatch:e})")]
    InconsistentField { mismatch: f64 },

    #[error("joint covariance of {which} is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    PsdViolation { which: String, min_eigenvalue: f64 },

    #[error("no nonzero antisymmetric 1x1 matrix exists; S + S^T = 2S determines S in one dimension")]
    NotApplicableInOneDimension,

    #[error("snapshot data does not determine the plan: rank gap {rank_gap} on a {free_dim}-dimensional feasible subspace (smallest singular value {min_singular_value:e})")]
    IllPosed {
        rank_gap: usize,
        free_dim: usize,
        min_singular_value: f64,
    },

    #[error("snapshot at t = {t} disagrees with the declared marginal by {deviation:e}")]
    MarginalMismatch { t: f64, deviation: f64 },

    #[error("no nonnegative plan fits the snapshots (residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("particle state became non-finite at t = {t}")]
    NonFinite { t: f64 },

    #[error("total kernel weight underflowed at query point {index}")]
    EmptyNeighborhood { index: usize },
}

impl Error {
    /// Stable variant name for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidInput(_) => "InvalidInput",
            Error::SingularCovariance { .. } => "SingularCovariance",
            Error::SingularMarginal { .. } => "SingularMarginal",
            Error::InconsistentField { .. } => "InconsistentField",
            Error::PsdViolation { .. } => "PSDViolation",
            Error::NotApplicableInOneDimension => "NotApplicableInOneDimension",
            Error::IllPosed { .. } => "IllPosed",
            Error::MarginalMismatch { .. } => "MarginalMismatch",
            Error::Infeasible { .. } => "Infeasible",
            Error::NonFinite { .. } => "NonFinite",
            Error::EmptyNeighborhood { .. } => "EmptyNeighborhood",
        }
    }
}
