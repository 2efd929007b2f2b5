//! Flow matching as regression: estimate E[X₁ − X₀ | X_t = x] from sampled
//! pairs with a kernel smoother and compare with the exact affine field.

use inverse_fm::gaussian::{marginal_at, velocity_field};
use inverse_fm::transport::{estimate_velocity, sample_plan, silverman_bandwidth};
use inverse_fm::GaussianPlan;
use nalgebra::{dmatrix, dvector, DVector};

fn main() -> inverse_fm::Result<()> {
    let plan = GaussianPlan::validated(dvector![0.0], dvector![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![0.5])?;
    let t = 0.3;
    let samples = sample_plan(&plan, 100_000, 0)?;
    let h = silverman_bandwidth(&samples, t);
    let m = marginal_at(&plan, t)?;
    let sd = m.cov[(0, 0)].sqrt();
    let queries: Vec<DVector<f64>> = (-4..=4).map(|k| dvector![m.mean[0] + 0.5 * k as f64 * sd]).collect();
    let estimates = estimate_velocity(&samples, t, &queries, h)?;
    let exact = velocity_field(&plan, t)?;
    println!("bandwidth {h:.4}");
    for (q, e) in queries.iter().zip(&estimates) {
        println!("x = {:+.3}  estimate {:+.4}  exact {:+.4}", q[0], e[0], exact.eval(q)[0]);
    }
    Ok(())
}
