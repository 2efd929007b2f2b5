//! The snapshot at time t is the law of (1 − t)X₀ + tX₁, so its
//! characteristic function at ξ is the plan's at ((1 − t)ξ, tξ). Sweeping t
//! covers every direction of the positive quadrant.

use inverse_fm::onedim::{char_fn, forward_snapshot, marginal_cf, CfQuery};
use inverse_fm::random::random_discrete_plan;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inverse_fm::Result<()> {
    let plan = random_discrete_plan(&mut ChaCha8Rng::seed_from_u64(1), 3, 3);
    for (xi0, xi1) in [(1.0, 0.0), (0.8, 1.3), (0.0, 2.0)] {
        let (t, xi) = CfQuery::quadrant(xi0, xi1)?.as_ray();
        let from_snapshot = marginal_cf(&forward_snapshot(&plan, t)?, xi);
        let direct = char_fn(&plan, xi0, xi1);
        println!(
            "(ξ₀, ξ₁) = ({xi0}, {xi1}) -> t = {t:.4}, ξ = {xi:.4}: snapshot {from_snapshot:.6}, plan {direct:.6}"
        );
    }
    Ok(())
}
