//! Marginal curve of a Gaussian plan: μ_t and Σ_t on a coarse grid, for two
//! couplings of the same endpoints.

use inverse_fm::gaussian::marginal_at;
use inverse_fm::GaussianPlan;
use nalgebra::{dmatrix, dvector, DMatrix};

fn main() -> inverse_fm::Result<()> {
    let eye = DMatrix::identity(2, 2);
    let independent = GaussianPlan::validated(dvector![0.0, 0.0], dvector![2.0, 0.0], eye.clone(), eye.clone(), DMatrix::zeros(2, 2))?;
    let correlated = GaussianPlan::validated(dvector![0.0, 0.0], dvector![2.0, 0.0], eye.clone(), eye, dmatrix![0.8, 0.0; 0.0, 0.8])?;

    for (name, plan) in [("independent", &independent), ("correlated", &correlated)] {
        println!("{name}:");
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let m = marginal_at(plan, t)?;
            println!(
                "  t = {t:.2}  mean = ({:.3}, {:.3})  var = ({:.3}, {:.3})",
                m.mean[0], m.mean[1], m.cov[(0, 0)], m.cov[(1, 1)]
            );
        }
    }
    Ok(())
}
