//! In two or more dimensions the marginal curve only sees S + Sᵀ: adding and
//! subtracting an antisymmetric part gives two different plans with the same
//! p_t for every t, and different initial velocities.

use inverse_fm::gaussian::{counterexample_pair, field_discrepancy, MarginalCurveGaussian};
use nalgebra::{dmatrix, DMatrix};

fn main() -> inverse_fm::Result<()> {
    let eye = DMatrix::identity(2, 2);
    let antisym = dmatrix![0.0, 0.5; -0.5, 0.0];
    let (p, q) = counterexample_pair(&eye, &eye, &DMatrix::zeros(2, 2), &antisym)?;
    println!("S  = {:.2}", p.cross);
    println!("S' = {:.2}", q.cross);

    let dev = MarginalCurveGaussian::uniform(p.clone(), 101)?.max_deviation(&q)?;
    println!("marginal curves, 101 times: max mean dev {:.1e}, max cov dev {:.1e}", dev.mean, dev.cov);
    for t in [0.0, 0.25, 0.5, 0.75] {
        println!("field discrepancy at t = {t:.2}: {:.4}", field_discrepancy(&p, &q, t)?);
    }

    match counterexample_pair(&DMatrix::identity(1, 1), &DMatrix::identity(1, 1), &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)) {
        Err(e) => println!("D = 1: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
