use nalgebra::DMatrix;

use crate::error::{LamnError, Result};
use crate::model::ProjectionFrame;

/// `V_L`: tridiagonal `(L+1) × (L+1)`, diagonal `2/3` with `1/3` at both
/// corners, off-diagonal `1/6`.
pub fn v_matrix(l: usize) -> DMatrix<f64> {
    assert!(l >= 1, "V_L needs L >= 1");
    DMatrix::from_fn(l + 1, l + 1, |i, j| {
        if i == j {
            if i == 0 || i == l {
                1.0 / 3.0
            } else {
                2.0 / 3.0
            }
        } else if i.abs_diff(j) == 1 {
            1.0 / 6.0
        } else {
            0.0
        }
    })
}

/// A `ψ_L^{k,l}(A)` matrix with the data it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    pub k: u8,
    pub l: u8,
    pub big_l: usize,
    pub base: DMatrix<f64>,
    pub dense: DMatrix<f64>,
}

/// Side length of `ψ^{k,·}` along its first index.
pub fn psi_dim(frame: &ProjectionFrame, k: u8, big_l: usize) -> usize {
    big_l * frame.q() + if k == 2 { frame.tail_dim() } else { 0 }
}

/// Builds `ψ_L^{k,l}(A)`.
///
/// Slot `s` occupies rows `s·q .. (s+1)·q`, with the `q1` rows of `Q̃₁` before
/// the `q2` rows of `Q̃₂`; the `kappa − q1` rows of `Q̃₃` follow the last slot.
pub fn psi_build(a: &DMatrix<f64>, frame: &ProjectionFrame, k: u8, l: u8, big_l: usize) -> Result<PsiMatrix> {
    if !(1..=2).contains(&k) || !(1..=2).contains(&l) {
        return Err(LamnError::InvalidArgument(format!("psi kind ({k}, {l}) must lie in {{1, 2}}^2")));
    }
    if big_l < 3 {
        return Err(LamnError::InvalidArgument(format!("psi needs L >= 3, got {big_l}")));
    }
    if a.shape() != (frame.kappa(), frame.kappa()) {
        return Err(LamnError::Dimension(format!("A is {:?}, frame has kappa = {}", a.shape(), frame.kappa())));
    }
    Ok(PsiMatrix { k, l, big_l, base: a.clone(), dense: psi_dense(a, frame, k, l, big_l) })
}

/// Dense `ψ_L^{k,l}(A)` without argument checks.
pub fn psi_dense(a: &DMatrix<f64>, frame: &ProjectionFrame, k: u8, l: u8, big_l: usize) -> DMatrix<f64> {
    let (q1, q2, t) = (frame.q1(), frame.q2(), frame.tail_dim());
    let q = q1 + q2;
    let ups = |i: usize, j: usize| -> DMatrix<f64> { frame.qt(i) * a * frame.qt(j).transpose() };
    let (u11, u12, u13) = (ups(1, 1), ups(1, 2), ups(1, 3));
    let (u22, u23, u33) = (ups(2, 2), ups(2, 3), ups(3, 3));
    let rows = psi_dim(frame, k, big_l);
    let cols = psi_dim(frame, l, big_l);
    let mut out = DMatrix::zeros(rows, cols);
    let mut put = |r: usize, c: usize, block: &DMatrix<f64>| {
        if r + block.nrows() <= rows && c + block.ncols() <= cols && block.len() > 0 {
            out.view_mut((r, c), block.shape()).copy_from(block);
        }
    };
    for s in 0..big_l {
        let base = s * q;
        let third = if s == 0 { 1.0 / 3.0 } else { 2.0 / 3.0 };
        put(base, base, &u11);
        put(base, base + q1, &(&u12 * 0.5));
        put(base + q1, base, &(u12.transpose() * 0.5));
        put(base + q1, base + q1, &(&u22 * third));
        if s + 1 < big_l {
            let next = base + q;
            // Ξ₂ = [[0, Υ₁₂/2], [0, Υ₂₂/6]] and its transpose below the diagonal.
            let upper_right = &u12 * 0.5;
            let lower_right = &u22 * (1.0 / 6.0);
            put(base, next + q1, &upper_right);
            put(base + q1, next + q1, &lower_right);
            put(next + q1, base, &upper_right.transpose());
            put(next + q1, base + q1, &lower_right.transpose());
        }
    }
    if t > 0 {
        let last = (big_l - 1) * q;
        let tail = big_l * q;
        let col13 = &u13 * 0.5;
        let col23 = &u23 * (1.0 / 6.0);
        if l == 2 {
            put(last, tail, &col13);
            put(last + q1, tail, &col23);
        }
        if k == 2 {
            put(tail, last, &col13.transpose());
            put(tail, last + q1, &col23.transpose());
        }
        if k == 2 && l == 2 {
            put(tail, tail, &(&u33 / 3.0));
        }
    }
    out
}
