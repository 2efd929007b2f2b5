//! Small dense least-squares solvers: Lawson–Hanson NNLS and an
//! equality-constrained variant built on top of it.

use nalgebra::{DMatrix, DVector};

/// Minimizes ‖A x − b‖ subject to x ≥ 0 (Lawson–Hanson active set).
///
/// Returns the solution and the residual norm.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let (m, n) = a.shape();
    assert_eq!(m, b.len(), "row count of A must match b");
    let mut x = DVector::zeros(n);
    if n == 0 {
        return (x, b.norm());
    }
    let tol = 10.0 * f64::EPSILON * a.amax().max(1.0) * (m.max(n) as f64);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;

        // Inner loop: keep the passive subproblem solution feasible.
        loop {
            let s = passive_lstsq(a, b, &passive);
            let blocking: Vec<usize> = (0..n).filter(|&k| passive[k] && s[k] <= tol).collect();
            if blocking.is_empty() {
                x = s;
                break;
            }
            let alpha = blocking
                .iter()
                .map(|&k| x[k] / (x[k] - s[k]))
                .fold(f64::INFINITY, f64::min)
                .clamp(0.0, 1.0);
            x += (&s - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= tol {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual = (a * &x - b).norm();
    (x, residual)
}

/// Unconstrained least squares restricted to the passive columns; other
/// entries of the result are zero.
fn passive_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let sub = a.select_columns(&cols);
    let sol = lstsq(&sub, b);
    let mut out = DVector::zeros(passive.len());
    for (k, &j) in cols.iter().enumerate() {
        out[j] = sol[k];
    }
    out
}

/// Minimum-norm least-squares solution via SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let eps = f64::EPSILON * a.nrows().max(a.ncols()) as f64 * svd.singular_values.max();
    svd.solve(b, eps).expect("SVD was computed with both factors")
}

/// Orthonormal basis of the null space of `a` (columns).
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let gram = a.tr_mul(a);
    let eig = gram.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let cols: Vec<usize> = (0..n)
        .filter(|&j| eig.eigenvalues[j] <= 1e-12 * scale)
        .collect();
    eig.eigenvectors.select_columns(&cols)
}

/// Minimizes ‖D x − d‖ subject to E x = e and x ≥ 0.
///
/// The equality rows are folded into an NNLS problem with a large weight; the
/// support found that way is then polished by solving the equality-constrained
/// problem exactly on it. The weighted solution is kept when the polished one
/// leaves the nonnegative orthant.
pub fn constrained_nnls(
    e: &DMatrix<f64>,
    rhs_e: &DVector<f64>,
    d: &DMatrix<f64>,
    rhs_d: &DVector<f64>,
) -> DVector<f64> {
    const EQUALITY_WEIGHT: f64 = 1e4;
    let n = e.ncols();
    assert_eq!(d.ncols(), n, "E and D must have the same column count");
    let stacked = stack(&(e * EQUALITY_WEIGHT), d);
    let stacked_rhs = stack_vec(&(rhs_e * EQUALITY_WEIGHT), rhs_d);
    let (weighted, _) = nnls(&stacked, &stacked_rhs);

    let support: Vec<usize> = (0..n).filter(|&j| weighted[j] > 0.0).collect();
    match polish_on_support(e, rhs_e, d, rhs_d, &support) {
        Some(polished) if polished.iter().all(|&v| v >= 0.0) => polished,
        Some(polished) if polished.min() > -1e-14 => polished.map(|v| v.max(0.0)),
        _ => weighted,
    }
}

fn polish_on_support(
    e: &DMatrix<f64>,
    rhs_e: &DVector<f64>,
    d: &DMatrix<f64>,
    rhs_d: &DVector<f64>,
    support: &[usize],
) -> Option<DVector<f64>> {
    let n = e.ncols();
    let e_s = e.select_columns(support);
    let d_s = d.select_columns(support);
    let particular = lstsq(&e_s, rhs_e);
    if (&e_s * &particular - rhs_e).amax() > 1e-10 {
        return None;
    }
    let z = null_space(&e_s);
    let sol = if z.ncols() == 0 || d_s.nrows() == 0 {
        particular
    } else {
        let reduced = &d_s * &z;
        let coef = lstsq(&reduced, &(rhs_d - &d_s * &particular));
        particular + z * coef
    };
    let mut out = DVector::zeros(n);
    for (k, &j) in support.iter().enumerate() {
        out[j] = sol[k];
    }
    Some(out)
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.rows_mut(0, top.nrows()).copy_from(top);
    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    m
}

fn stack_vec(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(top.len() + bottom.len(), top.iter().chain(bottom.iter()).copied())
}
