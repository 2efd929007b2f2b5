//! Closed-form flow matching inside the Gaussian family.
//!
//! For a Gaussian plan the interpolant X_t = (1 − t)X₀ + tX₁ is Gaussian with
//!
//! ```text
//! μ_t = (1 − t) μ₀ + t μ₁
//! Σ_t = (1 − t)² Σ₀ + t² Σ₁ + t(1 − t)(S + Sᵀ)
//! ```
//!
//! and the flow-matching velocity E[X₁ − X₀ | X_t = x] is affine in `x`. The
//! marginal curve only sees the symmetric part of `S`, whereas the velocity at
//! t = 0 sees all of it; [`recover_plan_from_v0`] inverts that map and
//! [`counterexample_pair`] builds two plans with identical marginal curves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    max_asymmetry, min_eigenvalue, spd_solve, symmetric_part, validate_gaussian_plan,
    AffineFieldSource, AffineVelocityField, GaussianDistribution, GaussianPlan, PD_FLOOR,
    SYMMETRY_TOL,
};

/// Largest tolerated mismatch between a supplied offset `b` and the offset
/// implied by the linear part.
pub const FIELD_CONSISTENCY_TOL: f64 = 1e-8;

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("time {t} is outside [0, 1]")))
    }
}

/// S + Sᵀ, exactly symmetric.
fn cross_sum(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    DMatrix::from_fn(n, n, |i, j| s[(i, j)] + s[(j, i)])
}

/// Law of X_t for the plan.
pub fn marginal_at(plan: &GaussianPlan, t: f64) -> Result<GaussianDistribution> {
    check_time(t)?;
    let s = 1.0 - t;
    let mean = &plan.mu0 * s + &plan.mu1 * t;
    let cov = &plan.sigma0 * (s * s) + &plan.sigma1 * (t * t) + cross_sum(&plan.cross) * (t * s);
    Ok(GaussianDistribution { mean, cov })
}

/// A plan together with a sorted grid of evaluation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCurveGaussian {
    pub plan: GaussianPlan,
    pub times: Vec<f64>,
}

impl MarginalCurveGaussian {
    pub fn new(plan: GaussianPlan, times: Vec<f64>) -> Result<Self> {
        for &t in &times {
            check_time(t)?;
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("times must be sorted".into()));
        }
        Ok(Self { plan, times })
    }

    /// Uniform grid of `points` times from 0 to 1 inclusive.
    pub fn uniform(plan: GaussianPlan, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::InvalidInput("a uniform grid needs at least two points".into()));
        }
        let times = (0..points).map(|k| k as f64 / (points - 1) as f64).collect();
        Self::new(plan, times)
    }

    pub fn evaluate(&self) -> Vec<(f64, GaussianDistribution)> {
        self.times
            .iter()
            .map(|&t| (t, marginal_at(&self.plan, t).expect("grid validated")))
            .collect()
    }

    /// Largest entrywise deviation in mean and in covariance against another
    /// plan's curve on this grid.
    pub fn max_deviation(&self, other: &GaussianPlan) -> Result<CurveDeviation> {
        if other.dim() != self.plan.dim() {
            return Err(Error::DimensionMismatch("plans have different dimensions".into()));
        }
        let mut dev = CurveDeviation::default();
        for (t, p) in self.evaluate() {
            let q = marginal_at(other, t)?;
            dev.mean = dev.mean.max((&p.mean - &q.mean).amax());
            dev.cov = dev.cov.max((&p.cov - &q.cov).amax());
        }
        Ok(dev)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveDeviation {
    pub mean: f64,
    pub cov: f64,
}

fn require_pd_source(plan: &GaussianPlan) -> Result<()> {
    plan.check_shapes()?;
    let min_eig = min_eigenvalue(&plan.sigma0);
    if min_eig < PD_FLOOR {
        return Err(Error::SingularCovariance {
            min_eigenvalue: min_eig,
        });
    }
    Ok(())
}

/// v₀(x₀) = E[X₁ | X₀ = x₀] − x₀ = μ₁ + SᵀΣ₀⁻¹(x₀ − μ₀) − x₀.
pub fn velocity_at_zero(plan: &GaussianPlan, x0: &DVector<f64>) -> Result<DVector<f64>> {
    require_pd_source(plan)?;
    if x0.len() != plan.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has length {}, expected {}",
            x0.len(),
            plan.dim()
        )));
    }
    let centered = DMatrix::from_column_slice(x0.len(), 1, (x0 - &plan.mu0).as_slice());
    let whitened = spd_solve(&plan.sigma0, &centered).ok_or(Error::SingularCovariance {
        min_eigenvalue: min_eigenvalue(&plan.sigma0),
    })?;
    let shift = plan.cross.tr_mul(&whitened);
    Ok(&plan.mu1 + shift.column(0) - x0)
}

/// The t = 0 field as an explicit affine map: A = SᵀΣ₀⁻¹ − I,
/// b = μ₁ − (A + I)μ₀.
pub fn initial_velocity_field(plan: &GaussianPlan) -> Result<AffineVelocityField> {
    require_pd_source(plan)?;
    let d = plan.dim();
    let gain = spd_solve(&plan.sigma0, &plan.cross)
        .ok_or(Error::SingularCovariance {
            min_eigenvalue: min_eigenvalue(&plan.sigma0),
        })?
        .transpose();
    let a = &gain - DMatrix::<f64>::identity(d, d);
    let b = &plan.mu1 - &gain * &plan.mu0;
    AffineVelocityField::new(0.0, a, b)
}

/// Evaluation options for [`velocity_field_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VelocityOptions {
    /// Use a pseudo-inverse of Σ_t when it is singular instead of failing.
    /// This leaves the setting of nondegenerate marginals; the result is
    /// only meaningful on the support of p_t.
    pub pseudo_inverse: bool,
}

/// v_t(x) = E[X₁ − X₀ | X_t = x] by Gaussian conditioning.
///
/// With C_t = Cov(X_t, X₁ − X₀) = (1 − t)(S − Σ₀) + t(Σ₁ − Sᵀ) the field is
/// A_t = C_tᵀ Σ_t⁻¹ and b_t = (μ₁ − μ₀) − A_t μ_t.
pub fn velocity_field(plan: &GaussianPlan, t: f64) -> Result<AffineVelocityField> {
    velocity_field_with(plan, t, VelocityOptions::default())
}

pub fn velocity_field_with(
    plan: &GaussianPlan,
    t: f64,
    options: VelocityOptions,
) -> Result<AffineVelocityField> {
    plan.check_shapes()?;
    let marginal = marginal_at(plan, t)?;
    let s = 1.0 - t;
    let c = (&plan.cross - &plan.sigma0) * s + (&plan.sigma1 - plan.cross.transpose()) * t;
    let min_eig = min_eigenvalue(&marginal.cov);
    let a_transposed = if min_eig >= PD_FLOOR {
        spd_solve(&marginal.cov, &c).ok_or(Error::SingularMarginal {
            t,
            min_eigenvalue: min_eig,
        })?
    } else if options.pseudo_inverse {
        let pinv = symmetric_part(&marginal.cov)
            .pseudo_inverse(PD_FLOOR)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        pinv * &c
    } else {
        return Err(Error::SingularMarginal {
            t,
            min_eigenvalue: min_eig,
        });
    };
    let a = a_transposed.transpose();
    let b = (&plan.mu1 - &plan.mu0) - &a * &marginal.mean;
    AffineVelocityField::new(t, a, b)
}

/// Time-indexed velocity of a Gaussian plan, for particle transport.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFlow {
    pub plan: GaussianPlan,
    pub options: VelocityOptions,
}

impl GaussianFlow {
    pub fn new(plan: GaussianPlan) -> Self {
        Self {
            plan,
            options: VelocityOptions::default(),
        }
    }
}

impl AffineFieldSource for GaussianFlow {
    fn dim(&self) -> usize {
        self.plan.dim()
    }

    fn field_at(&self, t: f64) -> Result<AffineVelocityField> {
        velocity_field_with(&self.plan, t, self.options)
    }
}

/// Largest entrywise gap between two plans' fields at time `t`.
pub fn field_discrepancy(p: &GaussianPlan, q: &GaussianPlan, t: f64) -> Result<f64> {
    let fp = velocity_field(p, t)?;
    let fq = velocity_field(q, t)?;
    Ok((&fp.a - &fq.a).amax().max((&fp.b - &fq.b).amax()))
}

/// Recovers the Gaussian plan from its endpoints and the affine initial
/// velocity v₀(x) = A x + b.
///
/// Matching v₀ against μ₁ + SᵀΣ₀⁻¹(x − μ₀) − x gives Sᵀ = (A + I)Σ₀ from the
/// linear part; the offset must then equal μ₁ − (A + I)μ₀.
pub fn recover_plan_from_v0(
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    v0: &AffineVelocityField,
) -> Result<GaussianPlan> {
    let d = mu0.len();
    if v0.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "velocity field has dimension {}, endpoints have {d}",
            v0.dim()
        )));
    }
    let probe = GaussianPlan::new(
        mu0.clone(),
        mu1.clone(),
        sigma0.clone(),
        sigma1.clone(),
        DMatrix::zeros(d, d),
    )?;
    require_pd_source(&probe)?;

    let gain = &v0.a + DMatrix::<f64>::identity(d, d);
    let expected_b = mu1 - &gain * mu0;
    let mismatch = (&v0.b - expected_b).amax();
    if mismatch > FIELD_CONSISTENCY_TOL {
        return Err(Error::InconsistentField { mismatch });
    }
    let cross = sigma0 * gain.transpose();
    let plan = GaussianPlan { cross, ..probe };
    validate_gaussian_plan(&plan)?.into_result("recovered plan")?;
    Ok(plan)
}

/// Two Gaussian plans with the same endpoints and the same marginal curve but
/// different cross-covariances S = sym + antisym and S′ = sym − antisym.
/// Both plans have zero means.
pub fn counterexample_pair(
    sigma0: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    sym_part: &DMatrix<f64>,
    antisym_part: &DMatrix<f64>,
) -> Result<(GaussianPlan, GaussianPlan)> {
    let d = sigma0.nrows();
    for (name, m) in [
        ("sigma0", sigma0),
        ("sigma1", sigma1),
        ("sym_part", sym_part),
        ("antisym_part", antisym_part),
    ] {
        if m.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {}x{}, expected {d}x{d}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    if d == 1 {
        return Err(Error::NotApplicableInOneDimension);
    }
    if d == 0 {
        return Err(Error::DimensionMismatch("dimension must be at least 1".into()));
    }
    if max_asymmetry(sym_part) > SYMMETRY_TOL {
        return Err(Error::InvalidInput("sym_part is not symmetric".into()));
    }
    let antisym_defect = (antisym_part + antisym_part.transpose()).amax();
    if antisym_defect > SYMMETRY_TOL {
        return Err(Error::InvalidInput(format!(
            "antisym_part is not antisymmetric (defect {antisym_defect:e})"
        )));
    }
    if antisym_part.amax() == 0.0 {
        return Err(Error::InvalidInput("antisym_part must be nonzero".into()));
    }

    let zeros = DVector::zeros(d);
    let build = |cross: DMatrix<f64>, which: &str| -> Result<GaussianPlan> {
        let plan = GaussianPlan::new(zeros.clone(), zeros.clone(), sigma0.clone(), sigma1.clone(), cross)?;
        validate_gaussian_plan(&plan)?.into_result(which)?;
        Ok(plan)
    };
    let first = build(sym_part + antisym_part, "S = sym + antisym")?;
    let second = build(sym_part - antisym_part, "S' = sym - antisym")?;
    Ok((first, second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn identity_plan(cross: DMatrix<f64>) -> GaussianPlan {
        GaussianPlan::new(
            dvector![0.0, 0.0],
            dvector![2.0, 0.0],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            cross,
        )
        .unwrap()
    }

    #[test]
    fn midpoint_of_independent_identity_plan() {
        let m = marginal_at(&identity_plan(DMatrix::zeros(2, 2)), 0.5).unwrap();
        assert_eq!(m.mean, dvector![1.0, 0.0]);
        assert_eq!(m.cov, DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn endpoints_are_exact() {
        let plan = GaussianPlan::new(
            dvector![0.3, -1.7],
            dvector![2.2, 0.1],
            dmatrix![1.3, 0.2; 0.2, 0.7],
            dmatrix![0.9, -0.1; -0.1, 1.1],
            dmatrix![0.1, 0.3; -0.2, 0.05],
        )
        .unwrap();
        let m0 = marginal_at(&plan, 0.0).unwrap();
        let m1 = marginal_at(&plan, 1.0).unwrap();
        assert_eq!((m0.mean, m0.cov), (plan.mu0.clone(), plan.sigma0.clone()));
        assert_eq!((m1.mean, m1.cov), (plan.mu1.clone(), plan.sigma1.clone()));
        assert!(marginal_at(&plan, 1.5).is_err());
    }

    #[test]
    fn identity_coupling_keeps_unit_variance() {
        let plan = GaussianPlan::new(dvector![0.0], dvector![0.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0])
            .unwrap();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            assert!((marginal_at(&plan, t).unwrap().cov[(0, 0)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn velocity_at_zero_scalar_example() {
        let plan = GaussianPlan::new(dvector![0.0], dvector![3.0], dmatrix![1.0], dmatrix![1.0], dmatrix![0.5])
            .unwrap();
        let v = velocity_at_zero(&plan, &dvector![2.0]).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn translation_coupling_has_constant_initial_velocity() {
        let sigma = dmatrix![1.5, 0.4; 0.4, 0.8];
        let plan = GaussianPlan::new(dvector![1.0, -1.0], dvector![3.0, 0.5], sigma.clone(), sigma.clone(), sigma)
            .unwrap();
        for x in [dvector![0.0, 0.0], dvector![10.0, -3.0], dvector![-2.5, 7.0]] {
            let v = velocity_at_zero(&plan, &x).unwrap();
            assert!((v - dvector![2.0, 1.5]).amax() < 1e-12);
        }
    }

    #[test]
    fn singular_source_is_rejected() {
        let plan = GaussianPlan::new(dvector![0.0], dvector![0.0], dmatrix![0.0], dmatrix![1.0], dmatrix![0.0])
            .unwrap();
        assert!(matches!(
            velocity_at_zero(&plan, &dvector![1.0]),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn pure_translation_field_is_constant_at_every_time() {
        let sigma = dmatrix![1.5, 0.4; 0.4, 0.8];
        let plan = GaussianPlan::new(dvector![1.0, -1.0], dvector![3.0, 0.5], sigma.clone(), sigma.clone(), sigma)
            .unwrap();
        for t in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let f = velocity_field(&plan, t).unwrap();
            assert!(f.a.amax() < 1e-14, "t={t}: {}", f.a);
            assert!((&f.b - dvector![2.0, 1.5]).amax() < 1e-14);
        }
    }

    #[test]
    fn antithetic_coupling_collapses_at_midpoint() {
        let plan = GaussianPlan::new(dvector![0.0], dvector![0.0], dmatrix![1.0], dmatrix![1.0], dmatrix![-1.0])
            .unwrap();
        assert!(matches!(
            velocity_field(&plan, 0.5),
            Err(Error::SingularMarginal { .. })
        ));
        let f = velocity_field_with(&plan, 0.5, VelocityOptions { pseudo_inverse: true }).unwrap();
        assert!(f.a.iter().chain(f.b.iter()).all(|v| v.is_finite()));
        assert!(velocity_field(&plan, 0.25).is_ok());
    }

    #[test]
    fn recovery_examples() {
        let mu0 = dvector![1.0, 2.0];
        let mu1 = dvector![-1.0, 0.5];
        let sigma0 = dmatrix![2.0, 0.3; 0.3, 1.0];
        let sigma1 = dmatrix![1.0, -0.2; -0.2, 1.5];
        let id = DMatrix::<f64>::identity(2, 2);

        let translation = AffineVelocityField::new(0.0, DMatrix::zeros(2, 2), &mu1 - &mu0).unwrap();
        let err = recover_plan_from_v0(&mu0, &sigma0, &mu1, &sigma1, &translation).unwrap_err();
        // Σ₀ ≠ Σ₁ so the translation coupling is not a valid plan here.
        assert!(matches!(err, Error::PsdViolation { .. }));

        let translation_ok =
            recover_plan_from_v0(&mu0, &sigma0, &mu1, &sigma0, &translation).unwrap();
        assert!((&translation_ok.cross - &sigma0).amax() < 1e-15);

        let independent = AffineVelocityField::new(0.0, -id.clone(), mu1.clone()).unwrap();
        let plan = recover_plan_from_v0(&mu0, &sigma0, &mu1, &sigma1, &independent).unwrap();
        assert_eq!(plan.cross, DMatrix::zeros(2, 2));

        let bad = AffineVelocityField::new(0.0, -id, &mu1 + dvector![1e-6, 0.0]).unwrap();
        assert!(matches!(
            recover_plan_from_v0(&mu0, &sigma0, &mu1, &sigma1, &bad),
            Err(Error::InconsistentField { .. })
        ));
    }

    #[test]
    fn scalar_recovery_round_trip() {
        let v0 = AffineVelocityField::new(0.0, dmatrix![-0.5], dvector![3.0]).unwrap();
        let plan = recover_plan_from_v0(&dvector![0.0], &dmatrix![1.0], &dvector![3.0], &dmatrix![1.0], &v0)
            .unwrap();
        assert!((plan.cross[(0, 0)] - 0.5).abs() < 1e-15);
        let field = initial_velocity_field(&plan).unwrap();
        assert!((field.a[(0, 0)] + 0.5).abs() < 1e-12);
        assert!((field.b[0] - 3.0).abs() < 1e-12);
        assert!((velocity_at_zero(&plan, &dvector![2.0]).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn counterexample_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let k = dmatrix![0.0, 0.5; -0.5, 0.0];
        let (p, q) = counterexample_pair(&id, &id, &DMatrix::zeros(2, 2), &k).unwrap();
        assert_ne!(p.cross, q.cross);
        assert_eq!(symmetric_part(&p.cross), symmetric_part(&q.cross));
        let curve = MarginalCurveGaussian::uniform(p.clone(), 101).unwrap();
        let dev = curve.max_deviation(&q).unwrap();
        assert!(dev.mean <= 1e-12 && dev.cov <= 1e-12);

        let one = DMatrix::<f64>::identity(1, 1);
        assert_eq!(
            counterexample_pair(&one, &one, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)),
            Err(Error::NotApplicableInOneDimension)
        );

        let big = dmatrix![0.0, 2.0; -2.0, 0.0];
        match counterexample_pair(&id, &id, &DMatrix::zeros(2, 2), &big) {
            Err(Error::PsdViolation { min_eigenvalue, .. }) => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("expected PsdViolation, got {other:?}"),
        }

        assert!(counterexample_pair(&id, &id, &DMatrix::zeros(2, 2), &id).is_err());
        assert!(counterexample_pair(&id, &id, &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn counterexample_initial_fields_differ() {
        let id = DMatrix::<f64>::identity(2, 2);
        let k = dmatrix![0.0, 0.3; -0.3, 0.0];
        let (p, q) = counterexample_pair(&id, &id, &(id.clone() * 0.2), &k).unwrap();
        assert!(field_discrepancy(&p, &q, 0.0).unwrap() > 0.1);
    }
}
