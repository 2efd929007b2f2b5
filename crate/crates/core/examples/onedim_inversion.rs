//! Recover a discrete plan on the line from a few snapshots of its marginal
//! curve. The certificate says whether the chosen times determine the plan.

use inverse_fm::onedim::{default_snapshot_times, invert_from_snapshots_detailed, uniqueness_certificate, SnapshotSet};
use inverse_fm::random::random_discrete_plan;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inverse_fm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plan = random_discrete_plan(&mut rng, 4, 3);
    let (x, y) = (plan.x_atoms(), plan.y_atoms());

    let one = uniqueness_certificate(x, y, &[0.5]);
    println!("one snapshot:  rank {}/{} -> {}", one.rank, one.free_dim, if one.positive { "unique" } else { "not enough" });

    let times = default_snapshot_times(x, y, 64);
    let snapshots = SnapshotSet::from_plan(&plan, &times)?;
    let inv = invert_from_snapshots_detailed(x, y, &plan.source_masses(), &plan.target_masses(), &snapshots)?;
    println!("times {times:?}: rank {}/{}", inv.certificate.rank, inv.certificate.free_dim);
    println!("true plan:{:.4}", plan.weights());
    println!("recovered:{:.4}", inv.plan.weights());
    println!("max weight error {:.2e}", (inv.plan.weights() - plan.weights()).amax());
    Ok(())
}
