//! Shared value types, validation and the small amount of linear algebra
//! every other module leans on.
//!
//! Matrices serialize as row-major nested arrays, vectors as flat arrays.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum absolute asymmetry tolerated in a covariance matrix.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Smallest eigenvalue still accepted as positive semidefinite.
pub const PSD_SLACK: f64 = 1e-10;
/// Smallest eigenvalue accepted as strictly positive definite.
pub const PD_FLOOR: f64 = 1e-12;
/// Slack on total mass and marginal sums.
pub const MASS_TOL: f64 = 1e-12;
/// Atoms closer than this (absolute units) are the same location.
pub const ATOM_TOL: f64 = 1e-9;

pub(crate) mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::matrix_from_rows(&rows).map_err(D::Error::custom)
    }
}

pub(crate) mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Builds a matrix from row-major nested rows. Ragged input is rejected.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Returns ½(S + Sᵀ).
pub fn symmetric_part(s: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(s.is_square(), "symmetric_part needs a square matrix");
    let n = s.nrows();
    // Float addition commutes, so entries (i, j) and (j, i) are bit-identical.
    DMatrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]))
}

/// Largest |m_ij − m_ji|.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetric_part(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric square root factor `L` with `L Lᵀ = m`, clamping tiny negative
/// eigenvalues to zero. Works for singular PSD matrices where Cholesky fails.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = symmetric_part(m).cholesky() {
        return chol.l();
    }
    psd_factor_with_floor(m, 0.0)
}

/// Eigen-based factor that also drops eigenvalues at or below `floor`, so
/// round-off in a numerically zero matrix does not become √ε-sized noise.
pub fn psd_factor_with_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetric_part(m).symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = if lambda > floor { lambda.sqrt() } else { 0.0 };
        v.column_mut(j).scale_mut(scale);
    }
    v
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub(crate) fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetric_part(m).cholesky().map(|c| c.solve(rhs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDistribution {
    #[serde(with = "serde_vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub cov: DMatrix<f64>,
}

impl GaussianDistribution {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = max_asymmetry(&cov);
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidInput(format!(
                "covariance asymmetry {asym:e} exceeds {SYMMETRY_TOL:e}"
            )));
        }
        let min_eig = min_eigenvalue(&cov);
        if min_eig < -PSD_SLACK {
            return Err(Error::PsdViolation {
                which: "covariance".into(),
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Gaussian coupling N((μ₀; μ₁), [[Σ₀, S], [Sᵀ, Σ₁]]).
///
/// `cross` is Cov(X₀, X₁) = E[(X₀ − μ₀)(X₁ − μ₁)ᵀ] and need not be symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPlan {
    #[serde(with = "serde_vector")]
    pub mu0: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub mu1: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub sigma0: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub sigma1: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub cross: DMatrix<f64>,
}

impl GaussianPlan {
    /// Assembles a plan, checking only shapes. Use [`validate_gaussian_plan`]
    /// or [`GaussianPlan::validated`] for the distributional invariants.
    pub fn new(
        mu0: DVector<f64>,
        mu1: DVector<f64>,
        sigma0: DMatrix<f64>,
        sigma1: DMatrix<f64>,
        cross: DMatrix<f64>,
    ) -> Result<Self> {
        let plan = Self {
            mu0,
            mu1,
            sigma0,
            sigma1,
            cross,
        };
        plan.check_shapes()?;
        Ok(plan)
    }

    /// Like [`GaussianPlan::new`] but rejects plans that fail validation.
    pub fn validated(
        mu0: DVector<f64>,
        mu1: DVector<f64>,
        sigma0: DMatrix<f64>,
        sigma1: DMatrix<f64>,
        cross: DMatrix<f64>,
    ) -> Result<Self> {
        let plan = Self::new(mu0, mu1, sigma0, sigma1, cross)?;
        validate_gaussian_plan(&plan)?.into_result("plan")?;
        Ok(plan)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.mu0.len();
        if d == 0 {
            return Err(Error::DimensionMismatch("dimension must be at least 1".into()));
        }
        let square = |name: &str, m: &DMatrix<f64>| {
            if m.shape() != (d, d) {
                Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        if self.mu1.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "mu1 has length {}, expected {d}",
                self.mu1.len()
            )));
        }
        square("sigma0", &self.sigma0)?;
        square("sigma1", &self.sigma1)?;
        square("cross", &self.cross)
    }

    /// The 2D×2D joint covariance [[Σ₀, S], [Sᵀ, Σ₁]].
    pub fn joint_cov(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&self.sigma0);
        m.view_mut((0, d), (d, d)).copy_from(&self.cross);
        m.view_mut((d, 0), (d, d)).copy_from(&self.cross.transpose());
        m.view_mut((d, d), (d, d)).copy_from(&self.sigma1);
        m
    }

    pub fn source(&self) -> GaussianDistribution {
        GaussianDistribution {
            mean: self.mu0.clone(),
            cov: self.sigma0.clone(),
        }
    }

    pub fn target(&self) -> GaussianDistribution {
        GaussianDistribution {
            mean: self.mu1.clone(),
            cov: self.sigma1.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured quantity (asymmetry or smallest eigenvalue).
    pub measured: f64,
    /// Threshold the measurement is compared against.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accepted: bool,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Converts a rejected report into the most specific error.
    pub fn into_result(self, which: &str) -> Result<Self> {
        if self.accepted {
            return Ok(self);
        }
        let failed = self.checks.iter().find(|c| !c.passed).expect("rejected report has a failure");
        Err(match failed.name.as_str() {
            "joint_psd" => Error::PsdViolation {
                which: which.to_string(),
                min_eigenvalue: failed.measured,
            },
            "sigma0_pd" | "sigma1_pd" => Error::SingularCovariance {
                min_eigenvalue: failed.measured,
            },
            _ => Error::InvalidInput(format!(
                "{which}: {} failed (measured {:e}, threshold {:e})",
                failed.name, failed.measured, failed.threshold
            )),
        })
    }
}

/// Checks symmetry and definiteness of the marginal blocks and
/// semidefiniteness of the joint covariance.
pub fn validate_gaussian_plan(plan: &GaussianPlan) -> Result<ValidationReport> {
    plan.check_shapes()?;
    let mut checks = Vec::with_capacity(5);
    for (name, m) in [("sigma0", &plan.sigma0), ("sigma1", &plan.sigma1)] {
        let asym = max_asymmetry(m);
        checks.push(Check {
            name: format!("{name}_symmetric"),
            passed: asym <= SYMMETRY_TOL,
            measured: asym,
            threshold: SYMMETRY_TOL,
        });
        let eig = min_eigenvalue(m);
        checks.push(Check {
            name: format!("{name}_pd"),
            passed: eig >= PD_FLOOR,
            measured: eig,
            threshold: PD_FLOOR,
        });
    }
    let joint = min_eigenvalue(&plan.joint_cov());
    checks.push(Check {
        name: "joint_psd".into(),
        passed: joint >= -PSD_SLACK,
        measured: joint,
        threshold: -PSD_SLACK,
    });
    Ok(ValidationReport {
        accepted: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[derive(Debug, Clone, Deserialize)]
struct RawMeasure {
    atoms: Vec<f64>,
    masses: Vec<f64>,
}

/// Finitely supported probability measure on the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure")]
pub struct AtomicMeasure1D {
    atoms: Vec<f64>,
    masses: Vec<f64>,
}

impl TryFrom<RawMeasure> for AtomicMeasure1D {
    type Error = Error;

    fn try_from(raw: RawMeasure) -> Result<Self> {
        Self::new(raw.atoms, raw.masses)
    }
}

impl AtomicMeasure1D {
    /// Sorts the atoms, merges any closer than [`ATOM_TOL`] (summing mass)
    /// and drops zero-mass atoms. Total mass must be 1.
    pub fn new(atoms: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if atoms.len() != masses.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} atoms but {} masses",
                atoms.len(),
                masses.len()
            )));
        }
        if atoms.iter().chain(&masses).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite atom or mass".into()));
        }
        if let Some(m) = masses.iter().find(|&&m| m < 0.0) {
            return Err(Error::InvalidInput(format!("negative mass {m}")));
        }
        let merged = merge_atoms(atoms.into_iter().zip(masses).collect());
        let total: f64 = merged.iter().map(|&(_, m)| m).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        let (atoms, masses) = merged.into_iter().filter(|&(_, m)| m > 0.0).unzip();
        Ok(Self { atoms, masses })
    }

    pub fn dirac(at: f64) -> Self {
        Self {
            atoms: vec![at],
            masses: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Mass at `x` (within [`ATOM_TOL`]), zero if no atom is there.
    pub fn mass_at(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.masses)
            .filter(|(&a, _)| (a - x).abs() <= ATOM_TOL)
            .map(|(_, &m)| m)
            .sum()
    }
}

/// Sorts `(location, mass)` pairs and chain-merges neighbours closer than
/// [`ATOM_TOL`]. Merged locations are mass-weighted means.
pub(crate) fn merge_atoms(mut pairs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (mass-weighted location sum, mass, first location, all locations equal)
    let mut out: Vec<(f64, f64, f64, bool)> = Vec::with_capacity(pairs.len());
    let mut last_loc = f64::NEG_INFINITY;
    for (x, m) in pairs {
        match out.last_mut() {
            Some(group) if x - last_loc <= ATOM_TOL => {
                group.0 += x * m;
                group.1 += m;
                group.3 &= x == group.2;
            }
            _ => out.push((x * m, m, x, true)),
        }
        last_loc = x;
    }
    // Coincident locations are kept bit-exact rather than re-averaged.
    out.into_iter()
        .map(|(weighted, mass, first, exact)| {
            if exact || mass <= 0.0 {
                (first, mass)
            } else {
                (weighted / mass, mass)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Deserialize)]
struct RawDiscretePlan {
    x_atoms: Vec<f64>,
    y_atoms: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

/// Coupling of two finitely supported measures on the line.
///
/// Row sums of `weights` are the source masses at `x_atoms`, column sums the
/// target masses at `y_atoms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDiscretePlan")]
pub struct DiscretePlan1D {
    x_atoms: Vec<f64>,
    y_atoms: Vec<f64>,
    #[serde(with = "serde_matrix")]
    weights: DMatrix<f64>,
}

impl TryFrom<RawDiscretePlan> for DiscretePlan1D {
    type Error = Error;

    fn try_from(raw: RawDiscretePlan) -> Result<Self> {
        let weights = matrix_from_rows(&raw.weights)?;
        Self::new(raw.x_atoms, raw.y_atoms, weights)
    }
}

fn check_strictly_increasing(name: &str, atoms: &[f64]) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::InvalidInput(format!("{name} is empty")));
    }
    if atoms.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has a non-finite entry")));
    }
    if let Some(w) = atoms.windows(2).find(|w| w[1] - w[0] <= ATOM_TOL) {
        return Err(Error::InvalidInput(format!(
            "{name} must be distinct with gaps above {ATOM_TOL:e}: {} and {}",
            w[0], w[1]
        )));
    }
    Ok(())
}

fn sorted_order(atoms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..atoms.len()).collect();
    order.sort_by(|&i, &j| atoms[i].total_cmp(&atoms[j]));
    order
}

impl DiscretePlan1D {
    /// Atoms may be given in any order; rows and columns of `weights` are
    /// permuted along with them so atoms are stored increasing.
    pub fn new(x_atoms: Vec<f64>, y_atoms: Vec<f64>, weights: DMatrix<f64>) -> Result<Self> {
        if weights.shape() != (x_atoms.len(), y_atoms.len()) {
            return Err(Error::DimensionMismatch(format!(
                "weights are {}x{}, expected {}x{}",
                weights.nrows(),
                weights.ncols(),
                x_atoms.len(),
                y_atoms.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("weight {w} is not a finite nonnegative number")));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!("weights sum to {total}, expected 1")));
        }
        let (rows, cols) = (sorted_order(&x_atoms), sorted_order(&y_atoms));
        let x_atoms: Vec<f64> = rows.iter().map(|&i| x_atoms[i]).collect();
        let y_atoms: Vec<f64> = cols.iter().map(|&j| y_atoms[j]).collect();
        check_strictly_increasing("x_atoms", &x_atoms)?;
        check_strictly_increasing("y_atoms", &y_atoms)?;
        let weights = DMatrix::from_fn(rows.len(), cols.len(), |i, j| weights[(rows[i], cols[j])]);
        Ok(Self {
            x_atoms,
            y_atoms,
            weights,
        })
    }

    pub fn x_atoms(&self) -> &[f64] {
        &self.x_atoms
    }

    pub fn y_atoms(&self) -> &[f64] {
        &self.y_atoms
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn source_masses(&self) -> Vec<f64> {
        self.weights.row_iter().map(|r| r.sum()).collect()
    }

    pub fn target_masses(&self) -> Vec<f64> {
        self.weights.column_iter().map(|c| c.sum()).collect()
    }

    /// Whether the plan lies in Π(p₀, p₁) for the given marginal masses.
    pub fn has_marginals(&self, source: &[f64], target: &[f64]) -> bool {
        source.len() == self.x_atoms.len()
            && target.len() == self.y_atoms.len()
            && self
                .source_masses()
                .iter()
                .zip(source)
                .chain(self.target_masses().iter().zip(target))
                .all(|(a, b)| (a - b).abs() <= MASS_TOL)
    }
}

/// v_t(x) = A_t x + b_t at a fixed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineVelocityField {
    pub t: f64,
    #[serde(with = "serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub b: DVector<f64>,
}

impl AffineVelocityField {
    pub fn new(t: f64, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.shape() != (b.len(), b.len()) {
            return Err(Error::DimensionMismatch(format!(
                "linear part is {}x{} but offset has length {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        Ok(Self { t, a, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    /// Writes A x + b into `out` without allocating.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = self.b[i];
            for j in 0..d {
                acc += self.a[(i, j)] * x[j];
            }
            out[i] = acc;
        }
    }
}

/// A velocity field that yields an affine map at each time in [0, 1].
pub trait AffineFieldSource: Sync {
    fn dim(&self) -> usize;
    fn field_at(&self, t: f64) -> Result<AffineVelocityField>;
}
