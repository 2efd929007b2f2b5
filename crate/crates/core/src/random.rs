//! Random test instances: Gaussian plans with positive definite joint
//! covariance and discrete plans on random supports.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::types::{DiscretePlan1D, GaussianPlan};

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Plan whose joint covariance is W Wᵀ / (2D) + `ridge`·I for a Gaussian W,
/// so Σ₀, Σ₁ and the joint block are all strictly positive definite.
pub fn random_gaussian_plan<R: Rng + ?Sized>(rng: &mut R, dim: usize, ridge: f64) -> GaussianPlan {
    let w = normal_matrix(rng, 2 * dim, 2 * dim);
    let mut joint = &w * w.transpose() / (2 * dim) as f64;
    for i in 0..2 * dim {
        joint[(i, i)] += ridge;
    }
    // Exact symmetry for the marginal blocks.
    let joint = (&joint + joint.transpose()) * 0.5;
    let mu0 = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
    let mu1 = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
    GaussianPlan {
        mu0,
        mu1,
        sigma0: joint.view((0, 0), (dim, dim)).into_owned(),
        sigma1: joint.view((dim, dim), (dim, dim)).into_owned(),
        cross: joint.view((0, dim), (dim, dim)).into_owned(),
    }
}

/// Strictly increasing atoms with gaps of at least `min_gap`.
pub fn random_support<R: Rng + ?Sized>(rng: &mut R, len: usize, min_gap: f64) -> Vec<f64> {
    let mut x = rng.gen_range(-3.0..0.0);
    (0..len)
        .map(|_| {
            let here = x;
            x += min_gap + rng.gen_range(0.0..1.5);
            here
        })
        .collect()
}

/// n×m plan with every weight bounded away from zero.
pub fn random_discrete_plan<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> DiscretePlan1D {
    let x = random_support(rng, n, 0.1);
    let y = random_support(rng, m, 0.1);
    let raw = DMatrix::from_fn(n, m, |_, _| rng.gen_range(0.1..1.0));
    let total = raw.sum();
    DiscretePlan1D::new(x, y, raw / total).expect("positive weights normalised to one")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{min_eigenvalue, validate_gaussian_plan};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_plans_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dim in 1..=6 {
            let plan = random_gaussian_plan(&mut rng, dim, 0.05);
            assert!(validate_gaussian_plan(&plan).unwrap().accepted);
            assert!(min_eigenvalue(&plan.joint_cov()) > 0.0);
        }
        for (n, m) in [(1, 1), (2, 5), (5, 3)] {
            let p = random_discrete_plan(&mut rng, n, m);
            assert!(p.weights().iter().all(|&w| w > 0.0));
        }
    }
}
