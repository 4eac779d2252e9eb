//! Dense linear-algebra helpers shared by the covariance, score and
//! information modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{LamnError, Result};

/// Relative tolerance used to decide which singular values span a kernel.
pub const KERNEL_RTOL: f64 = 1e-10;

/// Condition number above which a structured covariance is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Moore–Penrose pseudo-inverse through the SVD.
///
/// Singular values below `σ_max · max(rows, cols) · 1e-14` are treated as zero,
/// so the zero matrix maps to the (transposed-shape) zero matrix.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    if sigma_max == 0.0 {
        return DMatrix::zeros(cols, rows);
    }
    let tol = sigma_max * rows.max(cols) as f64 * 1e-14;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            out += (v_t.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    out
}

/// Numerical rank with the kernel tolerance `KERNEL_RTOL · σ_max`.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > KERNEL_RTOL * smax).count()
}

/// Smallest singular value (zero for empty matrices).
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.singular_values().min()
}

/// Orthonormal basis (as columns) of the column space of `p`, with `dim`
/// vectors picked by greedy pivoted Gram–Schmidt over the columns of `p`.
///
/// Ties are broken by the lowest column index, so the output only depends on
/// `p` itself.
pub fn column_space_basis(p: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let n = p.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(dim);
    let mut residuals: Vec<DVector<f64>> = (0..p.ncols()).map(|j| p.column(j).into_owned()).collect();
    while basis.len() < dim {
        let mut best = None;
        let mut best_norm = 0.0;
        for (j, r) in residuals.iter().enumerate() {
            let nr = r.norm();
            if nr > best_norm * (1.0 + 1e-12) {
                best_norm = nr;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        if best_norm == 0.0 {
            break;
        }
        let q = &residuals[j] / best_norm;
        for r in residuals.iter_mut() {
            let c = q.dot(r);
            r.axpy(-c, &q, 1.0);
        }
        basis.push(q);
    }
    let mut out = DMatrix::zeros(n, basis.len());
    for (k, b) in basis.iter().enumerate() {
        out.set_column(k, b);
    }
    out
}

/// Orthonormal kernel basis (columns) of `a`, with the rank decided by
/// `KERNEL_RTOL`. An injective map yields a matrix with zero columns.
pub fn kernel_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = a.ncols();
    let r = rank(a);
    if r == cols {
        return DMatrix::zeros(cols, 0);
    }
    let proj = DMatrix::identity(cols, cols) - pinv(a) * a;
    column_space_basis(&proj, cols - r)
}

/// Symmetric part `(a + aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `a` (`+∞` for empty input).
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(a).symmetric_eigenvalues().min()
}

/// `tr(a b)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Pairwise (cascade) summation with a fixed reduction tree.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of equally shaped matrices.
pub fn pairwise_sum_matrices(xs: &[DMatrix<f64>], rows: usize, cols: usize) -> DMatrix<f64> {
    match xs.len() {
        0 => DMatrix::zeros(rows, cols),
        1 => xs[0].clone(),
        n => {
            let mid = n / 2;
            pairwise_sum_matrices(&xs[..mid], rows, cols) + pairwise_sum_matrices(&xs[mid..], rows, cols)
        }
    }
}

/// Result of inverting a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdInverse {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
    /// Set when Cholesky failed and the eigenvalue-clamped route was used.
    pub clamped: bool,
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
///
/// Cholesky first; on failure, falls back to an eigendecomposition with
/// eigenvalues clamped at `1e-12 · λ_max` and logs a conditioning warning.
/// Matrices whose 1-norm condition number exceeds `MAX_CONDITION` are rejected.
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<SpdInverse> {
    let n = a.nrows();
    if n == 0 {
        return Ok(SpdInverse { inverse: DMatrix::zeros(0, 0), log_det: 0.0, clamped: false });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LamnError::NonFinite(what.to_string()));
    }
    let sym = symmetrize(a);
    let (inverse, log_det, clamped) = match sym.clone().cholesky() {
        Some(ch) => {
            let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            (ch.inverse(), log_det, false)
        }
        None => {
            let eig = sym.clone().symmetric_eigen();
            let lmax = eig.eigenvalues.max();
            let lmin = eig.eigenvalues.min();
            if lmax <= 0.0 {
                return Err(LamnError::Singular { what: what.to_string(), min_sv: lmin.max(0.0) });
            }
            if lmin <= lmax / MAX_CONDITION {
                let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
                return Err(LamnError::IllConditioned { what: what.to_string(), cond });
            }
            let floor = 1e-12 * lmax;
            log::warn!("{what}: Cholesky failed, using eigendecomposition with eigenvalues clamped at {floor:e}");
            let clamped_vals = eig.eigenvalues.map(|l| l.max(floor));
            let inv_vals = clamped_vals.map(|l| 1.0 / l);
            let inverse = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
            let log_det = clamped_vals.iter().map(|l| l.ln()).sum();
            (inverse, log_det, true)
        }
    };
    let cond = one_norm(&sym) * one_norm(&inverse);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(LamnError::IllConditioned { what: what.to_string(), cond });
    }
    Ok(SpdInverse { inverse, log_det, clamped })
}

/// Maximum absolute column sum.
pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry (zero for empty matrices).
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}
