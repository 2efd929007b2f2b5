//! Push samples of p₀ along v_t with RK4 and compare the cloud's moments with
//! the closed-form marginals.

use inverse_fm::gaussian::GaussianFlow;
use inverse_fm::random::random_gaussian_plan;
use inverse_fm::transport::marginal_moment_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inverse_fm::Result<()> {
    let plan = random_gaussian_plan(&mut ChaCha8Rng::seed_from_u64(2), 3, 0.05);
    let report = marginal_moment_check(&plan, &GaussianFlow::new(plan.clone()), &[0.25, 0.5, 0.75, 1.0], 50_000, 100, 0)?;
    for c in &report.checks {
        println!(
            "t = {:.2}  |mean err| {:.4} (tol {:.4})  |cov err| {:.4} (tol {:.4})  {}",
            c.t,
            c.mean_error,
            c.mean_tolerance,
            c.cov_error,
            c.cov_tolerance,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!("overall: {}", if report.passed { "pass" } else { "fail" });
    Ok(())
}
