//! Discrete one-dimensional plans: forward snapshots, characteristic
//! functions, and recovery of the plan from its marginal snapshots.
//!
//! For a plan π on atoms {x_i} × {y_j} the snapshot at time t is the atomic
//! measure with mass π_ij at (1 − t)x_i + t y_j. Its characteristic function
//! at frequency ξ equals the plan's characteristic function at
//! ((1 − t)ξ, tξ); sweeping (t, ξ) covers the closed positive quadrant, so
//! the snapshot family pins down φ_π there. On finite supports the same
//! information is a finite linear system in the unknown weights, which is
//! what [`invert_from_snapshots`] solves.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq;
use crate::types::{merge_atoms, AtomicMeasure1D, DiscretePlan1D, ATOM_TOL, MASS_TOL};

/// Smallest singular value of the snapshot operator (on the
/// marginal-preserving subspace) that still certifies uniqueness.
pub const CERTIFICATE_TOL: f64 = 1e-10;
/// Endpoint snapshots must agree with declared marginals to this precision.
pub const ENDPOINT_TOL: f64 = 1e-10;
/// Largest data or constraint residual accepted from the solver.
pub const FEASIBILITY_TOL: f64 = 1e-6;

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("time {t} is outside [0, 1]")))
    }
}

/// Law of X_t = (1 − t)X₀ + tX₁ for (X₀, X₁) ~ plan.
pub fn forward_snapshot(plan: &DiscretePlan1D, t: f64) -> Result<AtomicMeasure1D> {
    check_time(t)?;
    let w = plan.weights();
    let mut pairs = Vec::with_capacity(w.len());
    for (i, &x) in plan.x_atoms().iter().enumerate() {
        for (j, &y) in plan.y_atoms().iter().enumerate() {
            if w[(i, j)] > 0.0 {
                pairs.push(((1.0 - t) * x + t * y, w[(i, j)]));
            }
        }
    }
    let (atoms, masses) = merge_atoms(pairs).into_iter().unzip();
    AtomicMeasure1D::new(atoms, masses)
}

/// φ_π(ξ₀, ξ₁) = Σ π_ij exp(i(ξ₀ x_i + ξ₁ y_j)).
pub fn char_fn(plan: &DiscretePlan1D, xi0: f64, xi1: f64) -> Complex64 {
    let w = plan.weights();
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, &x) in plan.x_atoms().iter().enumerate() {
        for (j, &y) in plan.y_atoms().iter().enumerate() {
            acc += w[(i, j)] * Complex64::from_polar(1.0, xi0 * x + xi1 * y);
        }
    }
    acc
}

/// Σ_k m_k exp(i ξ a_k).
pub fn marginal_cf(measure: &AtomicMeasure1D, xi: f64) -> Complex64 {
    measure
        .atoms()
        .iter()
        .zip(measure.masses())
        .map(|(&a, &m)| m * Complex64::from_polar(1.0, xi * a))
        .sum()
}

/// |E exp(iξX_t) − φ_π((1 − t)ξ, tξ)|, the two sides computed independently.
pub fn ray_identity_residual(plan: &DiscretePlan1D, t: f64, xi_t: f64) -> Result<f64> {
    let lhs = marginal_cf(&forward_snapshot(plan, t)?, xi_t);
    let rhs = char_fn(plan, (1.0 - t) * xi_t, t * xi_t);
    Ok((lhs - rhs).norm())
}

/// A frequency query, either as a point of the positive quadrant or as a
/// (time, frequency) pair along a ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfQuery {
    Quadrant { xi0: f64, xi1: f64 },
    Ray { t: f64, xi_t: f64 },
}

impl CfQuery {
    pub fn quadrant(xi0: f64, xi1: f64) -> Result<Self> {
        if xi0 < 0.0 || xi1 < 0.0 || !xi0.is_finite() || !xi1.is_finite() {
            return Err(Error::InvalidInput(format!(
                "frequencies must be finite and nonnegative, got ({xi0}, {xi1})"
            )));
        }
        Ok(Self::Quadrant { xi0, xi1 })
    }

    pub fn ray(t: f64, xi_t: f64) -> Result<Self> {
        check_time(t)?;
        if xi_t < 0.0 || !xi_t.is_finite() {
            return Err(Error::InvalidInput(format!("ray frequency {xi_t} must be nonnegative")));
        }
        Ok(Self::Ray { t, xi_t })
    }

    /// (ξ₀, ξ₁) = ((1 − t)ξ_t, tξ_t).
    pub fn as_quadrant(self) -> (f64, f64) {
        match self {
            Self::Quadrant { xi0, xi1 } => (xi0, xi1),
            Self::Ray { t, xi_t } => ((1.0 - t) * xi_t, t * xi_t),
        }
    }

    /// t = ξ₁ / (ξ₀ + ξ₁), ξ_t = ξ₀ + ξ₁. The origin maps to (0, 0).
    pub fn as_ray(self) -> (f64, f64) {
        match self {
            Self::Ray { t, xi_t } => (t, xi_t),
            Self::Quadrant { xi0, xi1 } => {
                let total = xi0 + xi1;
                if total == 0.0 {
                    (0.0, 0.0)
                } else {
                    (xi1 / total, total)
                }
            }
        }
    }

    /// φ_π at this query, read off the snapshot at the ray's time.
    pub fn eval_from_snapshot(self, plan: &DiscretePlan1D) -> Result<Complex64> {
        let (t, xi_t) = self.as_ray();
        Ok(marginal_cf(&forward_snapshot(plan, t)?, xi_t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub measure: AtomicMeasure1D,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSnapshot {
    t: f64,
    atoms: Vec<f64>,
    masses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSnapshotSet {
    snapshots: Vec<RawSnapshot>,
}

/// Observed marginals {p_t} at distinct, sorted times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSnapshotSet", into = "RawSnapshotSet")]
pub struct SnapshotSet {
    snapshots: Vec<Snapshot>,
}

impl TryFrom<RawSnapshotSet> for SnapshotSet {
    type Error = Error;

    fn try_from(raw: RawSnapshotSet) -> Result<Self> {
        let snapshots = raw
            .snapshots
            .into_iter()
            .map(|s| {
                Ok(Snapshot {
                    t: s.t,
                    measure: AtomicMeasure1D::new(s.atoms, s.masses)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(snapshots)
    }
}

impl From<SnapshotSet> for RawSnapshotSet {
    fn from(set: SnapshotSet) -> Self {
        Self {
            snapshots: set
                .snapshots
                .into_iter()
                .map(|s| RawSnapshot {
                    t: s.t,
                    atoms: s.measure.atoms().to_vec(),
                    masses: s.measure.masses().to_vec(),
                })
                .collect(),
        }
    }
}

impl SnapshotSet {
    /// Sorts by time; rejects repeated times and times outside [0, 1].
    pub fn new(mut snapshots: Vec<Snapshot>) -> Result<Self> {
        for s in &snapshots {
            check_time(s.t)?;
        }
        snapshots.sort_by(|a, b| a.t.total_cmp(&b.t));
        if let Some(w) = snapshots.windows(2).find(|w| w[0].t == w[1].t) {
            return Err(Error::InvalidInput(format!("time {} appears twice", w[0].t)));
        }
        Ok(Self { snapshots })
    }

    /// Snapshots of `plan` at each of `times`.
    pub fn from_plan(plan: &DiscretePlan1D, times: &[f64]) -> Result<Self> {
        let snapshots = times
            .iter()
            .map(|&t| Ok(Snapshot { t, measure: forward_snapshot(plan, t)? }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(snapshots)
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Largest atomwise mass difference between two atomic measures; an atom
/// present in only one of them counts with its full mass.
pub fn measure_discrepancy(a: &AtomicMeasure1D, b: &AtomicMeasure1D) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut worst = 0.0f64;
    let (aa, am, ba, bm) = (a.atoms(), a.masses(), b.atoms(), b.masses());
    while i < aa.len() || j < ba.len() {
        if i < aa.len() && j < ba.len() && (aa[i] - ba[j]).abs() <= ATOM_TOL {
            worst = worst.max((am[i] - bm[j]).abs());
            i += 1;
            j += 1;
        } else if j >= ba.len() || (i < aa.len() && aa[i] < ba[j]) {
            worst = worst.max(am[i]);
            i += 1;
        } else {
            worst = worst.max(bm[j]);
            j += 1;
        }
    }
    worst
}

/// Pairs (i, j) that land on the same location at time t, in increasing
/// order of location. Each group carries its mean location.
fn collision_groups(x_atoms: &[f64], y_atoms: &[f64], t: f64) -> Vec<(f64, Vec<usize>)> {
    let m = y_atoms.len();
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(x_atoms.len() * m);
    for (i, &x) in x_atoms.iter().enumerate() {
        for (j, &y) in y_atoms.iter().enumerate() {
            pairs.push(((1.0 - t) * x + t * y, i * m + j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (loc, idx) in pairs {
        match groups.last_mut() {
            Some((_, members)) if loc - last <= ATOM_TOL => members.push(idx),
            _ => groups.push((loc, vec![idx])),
        }
        last = loc;
    }
    for (loc, members) in &mut groups {
        let sum: f64 = members
            .iter()
            .map(|&k| (1.0 - t) * x_atoms[k / m] + t * y_atoms[k % m])
            .sum();
        *loc = sum / members.len() as f64;
    }
    groups
}

/// Linear map from weights (row-major, index i·m + j) to the masses of the
/// merged atoms at each time, one row per merged atom.
fn snapshot_operator(x_atoms: &[f64], y_atoms: &[f64], times: &[f64]) -> DMatrix<f64> {
    let k = x_atoms.len() * y_atoms.len();
    let rows: Vec<Vec<usize>> = times
        .iter()
        .flat_map(|&t| collision_groups(x_atoms, y_atoms, t).into_iter().map(|(_, g)| g))
        .collect();
    let mut op = DMatrix::zeros(rows.len(), k);
    for (r, members) in rows.iter().enumerate() {
        for &c in members {
            op[(r, c)] = 1.0;
        }
    }
    op
}

/// Row- and column-sum constraints on the n×m weights.
fn marginal_operator(n: usize, m: usize) -> DMatrix<f64> {
    let mut op = DMatrix::zeros(n + m, n * m);
    for i in 0..n {
        for j in 0..m {
            op[(i, i * m + j)] = 1.0;
            op[(n + j, i * m + j)] = 1.0;
        }
    }
    op
}

/// Orthonormal basis of weight perturbations with zero row and column sums.
fn marginal_null_basis(n: usize, m: usize) -> DMatrix<f64> {
    let free = (n - 1) * (m - 1);
    if free == 0 {
        return DMatrix::zeros(n * m, 0);
    }
    let mut basis = DMatrix::zeros(n * m, free);
    let mut col = 0;
    for i in 0..n - 1 {
        for j in 0..m - 1 {
            basis[(i * m + j, col)] = 1.0;
            basis[(i * m + m - 1, col)] = -1.0;
            basis[((n - 1) * m + j, col)] = -1.0;
            basis[((n - 1) * m + m - 1, col)] = 1.0;
            col += 1;
        }
    }
    basis.qr().q()
}

/// Whether a set of snapshot times determines every plan on the supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessCertificate {
    pub times: Vec<f64>,
    /// Dimension of the marginal-preserving affine subspace, (n − 1)(m − 1).
    pub free_dim: usize,
    /// Rank of the snapshot operator on that subspace.
    pub rank: usize,
    pub rank_gap: usize,
    /// Smallest singular value on the subspace; `None` when it is trivial.
    pub min_singular_value: Option<f64>,
    pub positive: bool,
}

/// Builds the snapshot operator restricted to the marginal-preserving
/// subspace and checks that it is injective.
pub fn uniqueness_certificate(x_atoms: &[f64], y_atoms: &[f64], times: &[f64]) -> UniquenessCertificate {
    let (n, m) = (x_atoms.len(), y_atoms.len());
    let basis = marginal_null_basis(n.max(1), m.max(1));
    let free_dim = basis.ncols();
    if free_dim == 0 {
        return UniquenessCertificate {
            times: times.to_vec(),
            free_dim,
            rank: 0,
            rank_gap: 0,
            min_singular_value: None,
            positive: true,
        };
    }
    let restricted = snapshot_operator(x_atoms, y_atoms, times) * basis;
    let singular: Vec<f64> = if restricted.nrows() == 0 {
        Vec::new()
    } else {
        restricted.singular_values().iter().copied().collect()
    };
    let rank = singular.iter().filter(|&&s| s > CERTIFICATE_TOL).count();
    let min_sv = if singular.len() < free_dim {
        0.0
    } else {
        singular.iter().copied().fold(f64::INFINITY, f64::min)
    };
    UniquenessCertificate {
        times: times.to_vec(),
        free_dim,
        rank,
        rank_gap: free_dim - rank,
        min_singular_value: Some(min_sv),
        positive: min_sv > CERTIFICATE_TOL,
    }
}

/// Evenly spaced interior times k/(K + 1), k = 1..K, with K grown from the
/// counting lower bound until the certificate is positive.
///
/// The bound is K ≥ ⌈(n − 1)(m − 1) / q⌉ where q is the smallest number of
/// merged atoms at a grid time minus the n + m − 1 marginal constraints.
/// Returns the last grid tried (uncertified) if `max_k` is reached.
pub fn default_snapshot_times(x_atoms: &[f64], y_atoms: &[f64], max_k: usize) -> Vec<f64> {
    let (n, m) = (x_atoms.len(), y_atoms.len());
    let free = (n.saturating_sub(1) * m.saturating_sub(1)) as f64;
    let grid = |k: usize| -> Vec<f64> { (1..=k).map(|i| i as f64 / (k + 1) as f64).collect() };
    let mut k = 2;
    loop {
        let times = grid(k);
        let q = times
            .iter()
            .map(|&t| collision_groups(x_atoms, y_atoms, t).len() as f64 - (n + m - 1) as f64)
            .fold(f64::INFINITY, f64::min)
            .max(1.0);
        let needed = (free / q).ceil() as usize;
        if k >= needed && uniqueness_certificate(x_atoms, y_atoms, &times).positive {
            return times;
        }
        if k >= max_k {
            return times;
        }
        k += 1;
    }
}

/// Diagnostics of a successful inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub plan: DiscretePlan1D,
    pub certificate: UniquenessCertificate,
    /// Largest |observed − fitted| over all snapshot atoms.
    pub data_residual: f64,
    /// Largest violation of the row and column sums.
    pub marginal_residual: f64,
    /// Per-snapshot atomwise discrepancy between the input and the forward
    /// snapshot of the recovered plan.
    pub snapshot_residuals: Vec<(f64, f64)>,
}

/// Recovers the plan with the given supports and marginals from snapshots of
/// its marginal curve.
pub fn invert_from_snapshots(
    x_atoms: &[f64],
    y_atoms: &[f64],
    source_masses: &[f64],
    target_masses: &[f64],
    snapshots: &SnapshotSet,
) -> Result<DiscretePlan1D> {
    invert_from_snapshots_detailed(x_atoms, y_atoms, source_masses, target_masses, snapshots)
        .map(|inv| inv.plan)
}

fn check_marginal(name: &str, atoms: &[f64], masses: &[f64]) -> Result<()> {
    if atoms.len() != masses.len() {
        return Err(Error::DimensionMismatch(format!(
            "{name}: {} atoms but {} masses",
            atoms.len(),
            masses.len()
        )));
    }
    if atoms.is_empty() {
        return Err(Error::InvalidInput(format!("{name}: empty support")));
    }
    if atoms.windows(2).any(|w| w[1] - w[0] <= ATOM_TOL) || atoms.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{name}: atoms must be finite and strictly increasing"
        )));
    }
    if masses.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidInput(format!("{name}: masses must be nonnegative")));
    }
    let total: f64 = masses.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidInput(format!("{name}: masses sum to {total}")));
    }
    Ok(())
}

pub fn invert_from_snapshots_detailed(
    x_atoms: &[f64],
    y_atoms: &[f64],
    source_masses: &[f64],
    target_masses: &[f64],
    snapshots: &SnapshotSet,
) -> Result<Inversion> {
    check_marginal("source", x_atoms, source_masses)?;
    check_marginal("target", y_atoms, target_masses)?;

    for snap in snapshots.snapshots() {
        let declared = if snap.t == 0.0 {
            Some((x_atoms, source_masses))
        } else if snap.t == 1.0 {
            Some((y_atoms, target_masses))
        } else {
            None
        };
        if let Some((atoms, masses)) = declared {
            let declared = AtomicMeasure1D::new(atoms.to_vec(), masses.to_vec())?;
            let deviation = measure_discrepancy(&declared, &snap.measure);
            if deviation > ENDPOINT_TOL {
                return Err(Error::MarginalMismatch { t: snap.t, deviation });
            }
        }
    }

    // Zero-mass rows and columns carry no unknowns.
    let rows: Vec<usize> = (0..x_atoms.len()).filter(|&i| source_masses[i] > 0.0).collect();
    let cols: Vec<usize> = (0..y_atoms.len()).filter(|&j| target_masses[j] > 0.0).collect();
    let xs: Vec<f64> = rows.iter().map(|&i| x_atoms[i]).collect();
    let ys: Vec<f64> = cols.iter().map(|&j| y_atoms[j]).collect();
    let ps: Vec<f64> = rows.iter().map(|&i| source_masses[i]).collect();
    let qs: Vec<f64> = cols.iter().map(|&j| target_masses[j]).collect();
    let (n, m) = (xs.len(), ys.len());

    let times = snapshots.times();
    let certificate = uniqueness_certificate(&xs, &ys, &times);
    if !certificate.positive {
        return Err(Error::IllPosed {
            rank_gap: certificate.rank_gap,
            free_dim: certificate.free_dim,
            min_singular_value: certificate.min_singular_value.unwrap_or(0.0),
        });
    }

    // Data equations: one per merged atom location per snapshot.
    let mut data_rows: Vec<Vec<usize>> = Vec::new();
    let mut observed: Vec<f64> = Vec::new();
    for snap in snapshots.snapshots() {
        let groups = collision_groups(&xs, &ys, snap.t);
        let mut used = vec![false; snap.measure.len()];
        for (loc, members) in groups {
            let mut mass = 0.0;
            for (k, (&a, &w)) in snap.measure.atoms().iter().zip(snap.measure.masses()).enumerate() {
                if !used[k] && (a - loc).abs() <= 2.0 * ATOM_TOL {
                    used[k] = true;
                    mass += w;
                }
            }
            data_rows.push(members);
            observed.push(mass);
        }
        let stray: f64 = used
            .iter()
            .zip(snap.measure.masses())
            .filter(|(&u, _)| !u)
            .map(|(_, &w)| w)
            .sum();
        if stray > FEASIBILITY_TOL {
            return Err(Error::Infeasible { residual: stray });
        }
    }

    let mut data_op = DMatrix::zeros(data_rows.len(), n * m);
    for (r, members) in data_rows.iter().enumerate() {
        for &c in members {
            data_op[(r, c)] = 1.0;
        }
    }
    let observed = DVector::from_vec(observed);
    let marg_op = marginal_operator(n, m);
    let marg_rhs = DVector::from_iterator(n + m, ps.iter().chain(&qs).copied());

    let weights = lsq::constrained_nnls(&marg_op, &marg_rhs, &data_op, &observed);
    let data_residual = if observed.is_empty() {
        0.0
    } else {
        (&data_op * &weights - &observed).amax()
    };
    let marginal_residual = (&marg_op * &weights - &marg_rhs).amax();
    if data_residual > FEASIBILITY_TOL || marginal_residual > FEASIBILITY_TOL {
        return Err(Error::Infeasible {
            residual: data_residual.max(marginal_residual),
        });
    }

    let mut full = DMatrix::zeros(x_atoms.len(), y_atoms.len());
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            full[(i, j)] = weights[a * m + b];
        }
    }
    // Absorb round-off in the total so the plan invariant holds exactly.
    let total = full.sum();
    if total > 0.0 {
        full /= total;
    }
    let plan = DiscretePlan1D::new(x_atoms.to_vec(), y_atoms.to_vec(), full)?;
    let snapshot_residuals = snapshots
        .snapshots()
        .iter()
        .map(|s| Ok((s.t, measure_discrepancy(&forward_snapshot(&plan, s.t)?, &s.measure))))
        .collect::<Result<Vec<_>>>()?;

    Ok(Inversion {
        plan,
        certificate,
        data_residual,
        marginal_residual,
        snapshot_residuals,
    })
}
