//! Forward and inverse flow matching for Gaussian and discrete
//! one-dimensional transport plans.
//!
//! Given a coupling π of p₀ and p₁, flow matching follows the interpolant
//! X_t = (1 − t)X₀ + tX₁ and the velocity v_t(x) = E[X₁ − X₀ | X_t = x]. This
//! crate computes that forward map in closed form where it exists and
//! implements the two inverse procedures that are well posed:
//!
//! * [`gaussian::recover_plan_from_v0`]: a Gaussian plan is determined by
//!   its initial velocity field.
//! * [`onedim::invert_from_snapshots`]: a discrete plan on the line is
//!   determined by its marginal snapshots p_t.
//!
//! [`gaussian::counterexample_pair`] builds two different Gaussian plans in
//! dimension two or more with the same marginal curve, and
//! [`transport`] checks the continuity equation by moving particles.

pub mod cli;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod lsq;
pub mod onedim;
pub mod random;
pub mod transport;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    symmetric_part, validate_gaussian_plan, AffineFieldSource, AffineVelocityField,
    AtomicMeasure1D, DiscretePlan1D, GaussianDistribution, GaussianPlan, ValidationReport,
};
