use nalgebra::DMatrix;

use crate::error::{LamnError, Result};
use crate::linalg;

/// Both sides of the partitioned-matrix identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurQuadratic {
    /// `A₁⁻¹ (A₂ B) [[A₁, B], [Bᵀ, C]]⁻¹ (A₂; Bᵀ)`.
    pub left: DMatrix<f64>,
    /// `(A₁⁻¹A₂)² + A₁⁻¹(A₂A₁⁻¹ − I) B (C − Bᵀ A₁⁻¹ B)⁻¹ Bᵀ (A₁⁻¹A₂ − I)`.
    pub right: DMatrix<f64>,
    pub discrepancy: f64,
}

fn inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sv = linalg::min_singular_value(a);
    let scale = a.norm().max(f64::MIN_POSITIVE);
    if !(sv > 1e-13 * scale) {
        return Err(LamnError::Singular { what: what.to_string(), min_sv: sv });
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| LamnError::Singular { what: what.to_string(), min_sv: sv })
}

pub fn schur_quadratic(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<SchurQuadratic> {
    let p = a1.nrows();
    let r = c.nrows();
    if a1.shape() != (p, p) || a2.shape() != (p, p) || b.shape() != (p, r) || c.shape() != (r, r) {
        return Err(LamnError::Dimension("schur_quadratic needs A1, A2: p×p, B: p×r, C: r×r".into()));
    }
    let a1_inv = inverse(a1, "A1")?;
    let schur = c - b.transpose() * &a1_inv * b;
    let schur_inv = inverse(&schur, "Schur complement C - B^T A1^-1 B")?;

    let mut full = DMatrix::zeros(p + r, p + r);
    full.view_mut((0, 0), (p, p)).copy_from(a1);
    full.view_mut((0, p), (p, r)).copy_from(b);
    full.view_mut((p, 0), (r, p)).copy_from(&b.transpose());
    full.view_mut((p, p), (r, r)).copy_from(c);
    let full_inv = inverse(&full, "partitioned matrix")?;
    let mut row = DMatrix::zeros(p, p + r);
    row.view_mut((0, 0), (p, p)).copy_from(a2);
    row.view_mut((0, p), (p, r)).copy_from(b);
    let mut col = DMatrix::zeros(p + r, p);
    col.view_mut((0, 0), (p, p)).copy_from(a2);
    col.view_mut((p, 0), (r, p)).copy_from(&b.transpose());
    let left = &a1_inv * row * full_inv * col;

    let id = DMatrix::identity(p, p);
    let m = &a1_inv * a2;
    let right = &m * &m + &a1_inv * (a2 * &a1_inv - &id) * b * schur_inv * b.transpose() * (&m - &id);
    let discrepancy = linalg::max_abs(&(&left - &right));
    Ok(SchurQuadratic { left, right, discrepancy })
}
