//! A Gaussian plan is pinned down by its endpoints and the initial velocity
//! field v₀(x) = A x + b. Recover S from (A, b) and check the round trip,
//! then show that a field with the wrong offset is refused.

use inverse_fm::gaussian::{initial_velocity_field, recover_plan_from_v0};
use inverse_fm::random::random_gaussian_plan;
use inverse_fm::{AffineVelocityField, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inverse_fm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let plan = random_gaussian_plan(&mut rng, 4, 0.05);
    let v0 = initial_velocity_field(&plan)?;

    let recovered = recover_plan_from_v0(&plan.mu0, &plan.sigma0, &plan.mu1, &plan.sigma1, &v0)?;
    println!("true S:\n{:.4}", plan.cross);
    println!("recovered S:\n{:.4}", recovered.cross);
    println!("max |S_rec - S| = {:.2e}", (&recovered.cross - &plan.cross).amax());

    let mut shifted_b = v0.b.clone();
    shifted_b[0] += 0.1;
    let bad = AffineVelocityField::new(0.0, v0.a.clone(), shifted_b)?;
    match recover_plan_from_v0(&plan.mu0, &plan.sigma0, &plan.mu1, &plan.sigma1, &bad) {
        Err(e @ Error::InconsistentField { .. }) => println!("shifted offset rejected: {e}"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
