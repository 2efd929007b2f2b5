//! Sampling couplings, pushing particles along a velocity field, and
//! estimating the velocity back from samples.
//!
//! Every particle draws from its own ChaCha stream (master seed, stream =
//! particle index), so results do not depend on how rayon schedules work.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::marginal_at;
use crate::types::{
    psd_factor, psd_factor_with_floor, spd_solve, validate_gaussian_plan, AffineFieldSource, AffineVelocityField,
    DiscretePlan1D, GaussianPlan,
};

/// Kernel weight sums below this are treated as an empty neighbourhood.
pub const KERNEL_WEIGHT_FLOOR: f64 = 1e-300;
/// Moment checks pass within this many Monte Carlo standard errors.
pub const MC_SIGMAS: f64 = 4.0;

/// Independent random stream for one particle.
pub fn particle_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one (x₀, x₁) pair into the given buffers.
pub trait PairSampler: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut ChaCha8Rng, x0: &mut [f64], x1: &mut [f64]);
}

/// Samples X₀ ~ N(μ₀, Σ₀), then X₁ | X₀ ~ N(μ₁ + G(X₀ − μ₀), Σ₁ − G S) with
/// G = SᵀΣ₀⁻¹.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mu0: DVector<f64>,
    mu1: DVector<f64>,
    source_factor: DMatrix<f64>,
    gain: DMatrix<f64>,
    residual_factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(plan: &GaussianPlan) -> Result<Self> {
        validate_gaussian_plan(plan)?.into_result("plan")?;
        let gain = spd_solve(&plan.sigma0, &plan.cross)
            .ok_or_else(|| Error::SingularCovariance {
                min_eigenvalue: crate::types::min_eigenvalue(&plan.sigma0),
            })?
            .transpose();
        let residual = &plan.sigma1 - &gain * &plan.cross;
        // Deterministic couplings leave a residual that is zero up to round-off.
        let floor = 1e-12 * plan.sigma1.amax().max(f64::MIN_POSITIVE);
        Ok(Self {
            mu0: plan.mu0.clone(),
            mu1: plan.mu1.clone(),
            source_factor: psd_factor(&plan.sigma0),
            gain,
            residual_factor: psd_factor_with_floor(&residual, floor),
        })
    }
}

impl PairSampler for GaussianSampler {
    fn dim(&self) -> usize {
        self.mu0.len()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, x0: &mut [f64], x1: &mut [f64]) {
        let d = self.dim();
        let z0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let z1: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let mut centered = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.source_factor[(i, j)] * z0[j];
            }
            centered[i] = acc;
            x0[i] = self.mu0[i] + acc;
        }
        for i in 0..d {
            let mut acc = self.mu1[i];
            for j in 0..d {
                acc += self.gain[(i, j)] * centered[j] + self.residual_factor[(i, j)] * z1[j];
            }
            x1[i] = acc;
        }
    }
}

/// Draws atom pairs with probability π_ij.
#[derive(Debug, Clone)]
pub struct DiscreteSampler {
    x_atoms: Vec<f64>,
    y_atoms: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl DiscreteSampler {
    pub fn new(plan: &DiscretePlan1D) -> Result<Self> {
        let index = WeightedIndex::new(plan.weights().transpose().iter().copied())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(Self {
            x_atoms: plan.x_atoms().to_vec(),
            y_atoms: plan.y_atoms().to_vec(),
            index,
        })
    }
}

impl PairSampler for DiscreteSampler {
    fn dim(&self) -> usize {
        1
    }

    fn draw(&self, rng: &mut ChaCha8Rng, x0: &mut [f64], x1: &mut [f64]) {
        // Transposed weights are row-major in (i, j).
        let k = self.index.sample(rng);
        let m = self.y_atoms.len();
        x0[0] = self.x_atoms[k / m];
        x1[0] = self.y_atoms[k % m];
    }
}

/// Flat storage of n pairs in dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSamples {
    pub dim: usize,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
}

impl PairSamples {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.x0.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        let r = i * self.dim..(i + 1) * self.dim;
        (&self.x0[r.clone()], &self.x1[r])
    }

    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let dim = pairs.first().map_or(0, |p| p.0.len());
        if pairs.iter().any(|(a, b)| a.len() != dim || b.len() != dim) {
            return Err(Error::DimensionMismatch("pairs have inconsistent lengths".into()));
        }
        Ok(Self {
            dim,
            x0: pairs.iter().flat_map(|p| p.0.iter().copied()).collect(),
            x1: pairs.iter().flat_map(|p| p.1.iter().copied()).collect(),
        })
    }
}

/// Draws `n` i.i.d. pairs, reproducibly for a given seed.
pub fn sample_pairs<S: PairSampler>(sampler: &S, n: usize, seed: u64) -> PairSamples {
    let d = sampler.dim();
    let mut x0 = vec![0.0; n * d];
    let mut x1 = vec![0.0; n * d];
    x0.par_chunks_mut(d)
        .zip(x1.par_chunks_mut(d))
        .enumerate()
        .for_each(|(i, (a, b))| {
            let mut rng = particle_rng(seed, i as u64);
            sampler.draw(&mut rng, a, b);
        });
    PairSamples { dim: d, x0, x1 }
}

/// Either plan family, for [`sample_plan`].
#[derive(Debug, Clone, Copy)]
pub enum PlanRef<'a> {
    Gaussian(&'a GaussianPlan),
    Discrete(&'a DiscretePlan1D),
}

impl<'a> From<&'a GaussianPlan> for PlanRef<'a> {
    fn from(p: &'a GaussianPlan) -> Self {
        Self::Gaussian(p)
    }
}

impl<'a> From<&'a DiscretePlan1D> for PlanRef<'a> {
    fn from(p: &'a DiscretePlan1D) -> Self {
        Self::Discrete(p)
    }
}

pub fn sample_plan<'a>(plan: impl Into<PlanRef<'a>>, n: usize, seed: u64) -> Result<PairSamples> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    Ok(match plan.into() {
        PlanRef::Gaussian(p) => sample_pairs(&GaussianSampler::new(p)?, n, seed),
        PlanRef::Discrete(p) => sample_pairs(&DiscreteSampler::new(p)?, n, seed),
    })
}

/// Field coefficients in flat row-major form.
struct Coefficients {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl From<&AffineVelocityField> for Coefficients {
    fn from(f: &AffineVelocityField) -> Self {
        let d = f.dim();
        let mut a = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                a.push(f.a[(i, j)]);
            }
        }
        Self { a, b: f.b.as_slice().to_vec() }
    }
}

impl Coefficients {
    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.b.len();
        for i in 0..d {
            let row = &self.a[i * d..(i + 1) * d];
            let mut acc = self.b[i];
            for j in 0..d {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
    }
}

/// Field at `t`. If the marginal is singular exactly at t = 1, the field is
/// extrapolated linearly from the two preceding evaluation times.
fn field_with_endpoint_fallback<F: AffineFieldSource + ?Sized>(
    field: &F,
    t: f64,
    h: f64,
) -> Result<AffineVelocityField> {
    match field.field_at(t) {
        Err(Error::SingularMarginal { .. }) if t == 1.0 => {
            let near = field.field_at(1.0 - 0.5 * h)?;
            let far = field.field_at(1.0 - h)?;
            AffineVelocityField::new(1.0, &near.a * 2.0 - &far.a, &near.b * 2.0 - &far.b)
        }
        other => other,
    }
}

/// One uniform-step RK4 integration of all particles from `t0` to `t1`.
fn rk4_segment<F: AffineFieldSource + ?Sized>(
    field: &F,
    positions: &mut [f64],
    dim: usize,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<()> {
    let h = (t1 - t0) / steps as f64;
    // Fields at t_k, t_k + h/2 for every step, plus the final endpoint.
    let mut table = Vec::with_capacity(2 * steps + 1);
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        table.push(Coefficients::from(&field_with_endpoint_fallback(field, t, h)?));
        table.push(Coefficients::from(&field_with_endpoint_fallback(field, t + 0.5 * h, h)?));
    }
    table.push(Coefficients::from(&field_with_endpoint_fallback(field, t1, h)?));

    let bad = positions
        .par_chunks_mut(dim)
        .map(|x| {
            let mut k1 = vec![0.0; dim];
            let mut k2 = vec![0.0; dim];
            let mut k3 = vec![0.0; dim];
            let mut k4 = vec![0.0; dim];
            let mut probe = vec![0.0; dim];
            for step in 0..steps {
                let (start, mid, end) = (&table[2 * step], &table[2 * step + 1], &table[2 * step + 2]);
                start.apply(x, &mut k1);
                for i in 0..dim {
                    probe[i] = x[i] + 0.5 * h * k1[i];
                }
                mid.apply(&probe, &mut k2);
                for i in 0..dim {
                    probe[i] = x[i] + 0.5 * h * k2[i];
                }
                mid.apply(&probe, &mut k3);
                for i in 0..dim {
                    probe[i] = x[i] + h * k3[i];
                }
                end.apply(&probe, &mut k4);
                for i in 0..dim {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Some(t0 + (step + 1) as f64 * h);
                }
            }
            None
        })
        .filter_map(|t| t)
        .min_by(f64::total_cmp);
    match bad {
        Some(t) => Err(Error::NonFinite { t }),
        None => Ok(()),
    }
}

/// Integrates dx/dt = v_t(x) from t = 0 to t = 1 with `steps` uniform RK4
/// steps. `x0` holds particles back to back, `dim` values each.
pub fn integrate_particles<F: AffineFieldSource + ?Sized>(
    field: &F,
    x0: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    let mut out = integrate_with_snapshots(field, x0, &[1.0], steps)?;
    Ok(out.pop().expect("one snapshot requested").1)
}

/// Integrates from t = 0 and records the cloud at each time of `grid`
/// (sorted, in (0, 1]). Each grid segment uses the step count that keeps the
/// step size closest to 1/`steps`.
pub fn integrate_with_snapshots<F: AffineFieldSource + ?Sized>(
    field: &F,
    x0: &[f64],
    grid: &[f64],
    steps: usize,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let dim = field.dim();
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    if dim == 0 || x0.len() % dim != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} coordinates do not split into particles of dimension {dim}",
            x0.len()
        )));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("grid must be sorted within [0, 1]".into()));
    }
    let mut positions = x0.to_vec();
    let mut current = 0.0;
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        if t > current {
            let segment_steps = (((t - current) * steps as f64).round() as usize).max(1);
            rk4_segment(field, &mut positions, dim, current, t, segment_steps)?;
            current = t;
        }
        out.push((t, positions.clone()));
    }
    Ok(out)
}

/// Sample mean and unbiased sample covariance of a flat particle cloud.
pub fn empirical_moments(positions: &[f64], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = positions.len() / dim;
    let mut mean = DVector::zeros(dim);
    for x in positions.chunks(dim) {
        for i in 0..dim {
            mean[i] += x[i];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for x in positions.chunks(dim) {
        for i in 0..dim {
            let di = x[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] += di * (x[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub t: f64,
    /// ‖m̂ − μ_t‖₂
    pub mean_error: f64,
    /// 4·sqrt(tr Σ_t / n)
    pub mean_tolerance: f64,
    /// ‖Σ̂ − Σ_t‖_F
    pub cov_error: f64,
    /// 4·sqrt((tr(Σ_t)² + tr(Σ_t²)) / n)
    pub cov_tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
    pub checks: Vec<MomentCheck>,
    pub passed: bool,
}

/// Transports samples of p₀ along `field` and compares the first two moments
/// of the cloud with the closed-form marginals of `plan` on `t_grid`.
///
/// Standard errors are root-mean-square sizes of the sampling error of a
/// Gaussian sample of size n: E‖m̂ − μ‖² = tr Σ / n and
/// E‖Σ̂ − Σ‖²_F ≈ (tr(Σ)² + tr(Σ²)) / n.
pub fn marginal_moment_check<F: AffineFieldSource + ?Sized>(
    plan: &GaussianPlan,
    field: &F,
    t_grid: &[f64],
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<MomentReport> {
    if field.dim() != plan.dim() {
        return Err(Error::DimensionMismatch("field and plan dimensions differ".into()));
    }
    let samples = sample_plan(plan, n, seed)?;
    let clouds = integrate_with_snapshots(field, &samples.x0, t_grid, steps)?;
    let d = plan.dim();
    let nf = n as f64;
    let mut checks = Vec::with_capacity(clouds.len());
    for (t, cloud) in clouds {
        let target = marginal_at(plan, t)?;
        let (mean, cov) = empirical_moments(&cloud, d);
        let trace = target.cov.trace();
        let trace_sq = (&target.cov * &target.cov).trace();
        let mean_error = (&mean - &target.mean).norm();
        let cov_error = (&cov - &target.cov).norm();
        let mean_tolerance = MC_SIGMAS * (trace / nf).sqrt();
        let cov_tolerance = MC_SIGMAS * ((trace * trace + trace_sq) / nf).sqrt();
        checks.push(MomentCheck {
            t,
            mean_error,
            mean_tolerance,
            cov_error,
            cov_tolerance,
            passed: mean_error <= mean_tolerance && cov_error <= cov_tolerance,
        });
    }
    Ok(MomentReport {
        particles: n,
        steps,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Rule-of-thumb bandwidth 1.06·σ̂·n^(−1/5), σ̂ averaged over coordinates of
/// the interpolated points x_t.
pub fn silverman_bandwidth(samples: &PairSamples, t: f64) -> f64 {
    let d = samples.dim;
    let xt: Vec<f64> = samples
        .x0
        .iter()
        .zip(&samples.x1)
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect();
    let (_, cov) = empirical_moments(&xt, d);
    let sigma = (0..d).map(|i| cov[(i, i)].sqrt()).sum::<f64>() / d as f64;
    1.06 * sigma * (samples.len() as f64).powf(-0.2)
}

/// Nadaraya–Watson estimate of E[X₁ − X₀ | X_t = q] at each query point,
/// with an isotropic Gaussian kernel.
pub fn estimate_velocity(
    samples: &PairSamples,
    t: f64,
    query_points: &[DVector<f64>],
    bandwidth: f64,
) -> Result<Vec<DVector<f64>>> {
    let d = samples.dim;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth {bandwidth} must be positive")));
    }
    if let Some(q) = query_points.iter().find(|q| q.len() != d) {
        return Err(Error::DimensionMismatch(format!(
            "query point of length {}, samples have dimension {d}",
            q.len()
        )));
    }
    let n = samples.len();
    let mut xt = vec![0.0; n * d];
    let mut delta = vec![0.0; n * d];
    for k in 0..n * d {
        xt[k] = (1.0 - t) * samples.x0[k] + t * samples.x1[k];
        delta[k] = samples.x1[k] - samples.x0[k];
    }
    let inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    query_points
        .par_iter()
        .enumerate()
        .map(|(index, q)| {
            let mut total = 0.0;
            let mut acc = DVector::zeros(d);
            for i in 0..n {
                let x = &xt[i * d..(i + 1) * d];
                let dist2: f64 = x.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                let w = (-dist2 * inv_two_h2).exp();
                total += w;
                for j in 0..d {
                    acc[j] += w * delta[i * d + j];
                }
            }
            if total < KERNEL_WEIGHT_FLOOR {
                return Err(Error::EmptyNeighborhood { index });
            }
            Ok(acc / total)
        })
        .collect()
}

/// Writes clouds as CSV with columns `t,particle_id,x_1..x_D`.
pub fn write_particle_csv<W: Write>(
    mut out: W,
    clouds: &[(f64, Vec<f64>)],
    dim: usize,
) -> std::io::Result<()> {
    write!(out, "t,particle_id")?;
    for i in 1..=dim {
        write!(out, ",x_{i}")?;
    }
    writeln!(out)?;
    for (t, cloud) in clouds {
        for (id, x) in cloud.chunks(dim).enumerate() {
            write!(out, "{},{id}", crate::io::fmt_f64(*t))?;
            for v in x {
                write!(out, ",{}", crate::io::fmt_f64(*v))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{velocity_field, GaussianFlow};
    use nalgebra::{dmatrix, dvector};

    struct ConstantField {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl AffineFieldSource for ConstantField {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn field_at(&self, t: f64) -> Result<AffineVelocityField> {
            AffineVelocityField::new(t, self.a.clone(), self.b.clone())
        }
    }

    fn translation_plan() -> GaussianPlan {
        let sigma = dmatrix![1.2, 0.3; 0.3, 0.7];
        GaussianPlan::new(dvector![0.5, -1.0], dvector![2.0, 3.0], sigma.clone(), sigma.clone(), sigma).unwrap()
    }

    #[test]
    fn single_atom_plan_always_returns_that_pair() {
        let plan = DiscretePlan1D::new(vec![0.25], vec![-3.0], dmatrix![1.0]).unwrap();
        let s = sample_plan(&plan, 50, 9).unwrap();
        assert!(s.x0.iter().all(|&v| v == 0.25));
        assert!(s.x1.iter().all(|&v| v == -3.0));
    }

    #[test]
    fn discrete_sampler_hits_each_pair_with_its_weight() {
        let plan = DiscretePlan1D::new(vec![0.0, 1.0], vec![0.0, 2.0], dmatrix![0.1, 0.2; 0.3, 0.4]).unwrap();
        let s = sample_plan(&plan, 40_000, 1).unwrap();
        let mut counts = [[0usize; 2]; 2];
        for i in 0..s.len() {
            let (a, b) = s.pair(i);
            counts[(a[0] == 1.0) as usize][(b[0] == 2.0) as usize] += 1;
        }
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let p = plan.weights()[(i, j)];
                let se = (p * (1.0 - p) / 40_000.0).sqrt();
                assert!((c as f64 / 40_000.0 - p).abs() < 4.0 * se);
            }
        }
    }

    #[test]
    fn translation_coupling_moves_every_sample_by_the_mean_shift() {
        let s = sample_plan(&translation_plan(), 1000, 3).unwrap();
        for i in 0..s.len() {
            let (a, b) = s.pair(i);
            assert!((b[0] - a[0] - 1.5).abs() < 1e-12);
            assert!((b[1] - a[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let plan = translation_plan();
        assert_eq!(sample_plan(&plan, 257, 11).unwrap(), sample_plan(&plan, 257, 11).unwrap());
        assert_ne!(sample_plan(&plan, 257, 11).unwrap(), sample_plan(&plan, 257, 12).unwrap());
        // A prefix of a longer run is the shorter run.
        let long = sample_plan(&plan, 300, 11).unwrap();
        let short = sample_plan(&plan, 100, 11).unwrap();
        assert_eq!(&long.x0[..200], &short.x0[..]);
    }

    #[test]
    fn zero_field_keeps_particles_still() {
        let field = ConstantField { a: DMatrix::zeros(2, 2), b: DVector::zeros(2) };
        let x0 = vec![1.0, 2.0, -3.0, 4.5];
        assert_eq!(integrate_particles(&field, &x0, 17).unwrap(), x0);
    }

    #[test]
    fn constant_field_translates_exactly() {
        let field = ConstantField { a: DMatrix::zeros(2, 2), b: dvector![1.5, -0.25] };
        let x1 = integrate_particles(&field, &[0.0, 0.0, 1.0, 1.0], 8).unwrap();
        assert_eq!(x1, vec![1.5, -0.25, 2.5, 0.75]);
    }

    #[test]
    fn rk4_error_shrinks_sixteenfold_per_halving() {
        // dx/dt = A x + b with constant coefficients; exact flow via expm.
        let a = dmatrix![-0.8, 1.1; -0.6, 0.3];
        let b = dvector![0.4, -0.2];
        let field = ConstantField { a: a.clone(), b: b.clone() };
        let x0 = dvector![1.0, -0.5];
        // x(1) = e^A x0 + A⁻¹(e^A − I) b
        let e = a.clone().exp();
        let exact = &e * &x0 + a.clone().try_inverse().unwrap() * (&e - DMatrix::identity(2, 2)) * &b;
        let mut errors = Vec::new();
        for steps in [2usize, 4, 8, 16, 32, 64] {
            let x1 = integrate_particles(&field, x0.as_slice(), steps).unwrap();
            errors.push((DVector::from_vec(x1) - &exact).norm());
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}, errors {errors:?}");
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let field = ConstantField { a: DMatrix::identity(1, 1) * 800.0, b: DVector::zeros(1) };
        assert!(matches!(
            integrate_particles(&field, &[1e300], 1),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn singular_endpoint_uses_extrapolated_field() {
        // Σ₁ is singular, so the field cannot be evaluated at t = 1 itself.
        let plan = GaussianPlan::new(dvector![0.0], dvector![1.0], dmatrix![1.0], dmatrix![0.0], dmatrix![0.0])
            .unwrap();
        assert!(velocity_field(&plan, 1.0).is_err());
        let flow = GaussianFlow::new(plan);
        let x1 = integrate_particles(&flow, &[0.3, -2.0, 5.0], 200).unwrap();
        for v in x1 {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn translation_transport_check_passes() {
        let plan = translation_plan();
        let flow = GaussianFlow::new(plan.clone());
        let report = marginal_moment_check(&plan, &flow, &[0.25, 0.5, 0.75, 1.0], 2000, 20, 5).unwrap();
        assert!(report.passed, "{report:?}");
        // The flow is a rigid shift, so the cloud's covariance never changes.
        let samples = sample_plan(&plan, 2000, 5).unwrap();
        let (_, cov0) = empirical_moments(&samples.x0, 2);
        let clouds = integrate_with_snapshots(&flow, &samples.x0, &[0.5, 1.0], 20).unwrap();
        for (_, cloud) in clouds {
            let (_, cov) = empirical_moments(&cloud, 2);
            assert!((cov - &cov0).amax() < 1e-12);
        }
    }

    #[test]
    fn translation_coupling_regression_is_exact() {
        let s = sample_plan(&translation_plan(), 500, 2).unwrap();
        let queries = vec![dvector![0.0, 0.0], dvector![1.0, 1.0], dvector![2.0, -1.0]];
        for h in [0.05, 0.5, 5.0] {
            for v in estimate_velocity(&s, 0.4, &queries, h).unwrap() {
                assert!((v - dvector![1.5, 4.0]).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn single_sample_regression_is_that_sample() {
        let s = PairSamples::from_pairs(&[(vec![0.0], vec![2.0])]).unwrap();
        for q in [-1.0, 0.0, 3.0] {
            let v = estimate_velocity(&s, 0.5, &[dvector![q]], 1.0).unwrap();
            assert_eq!(v[0][0], 2.0);
        }
    }

    #[test]
    fn far_query_has_empty_neighbourhood() {
        let s = PairSamples::from_pairs(&[(vec![0.0], vec![2.0])]).unwrap();
        assert!(matches!(
            estimate_velocity(&s, 0.5, &[dvector![0.0], dvector![1e6]], 0.1),
            Err(Error::EmptyNeighborhood { index: 1 })
        ));
        assert!(estimate_velocity(&s, 0.5, &[dvector![0.0]], 0.0).is_err());
    }

    #[test]
    fn particle_csv_layout() {
        let mut buf = Vec::new();
        write_particle_csv(&mut buf, &[(0.5, vec![1.0, 2.0, 3.0, 4.0])], 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,particle_id,x_1,x_2");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("5.0000000000000000e-1,1,"));
    }
}
