use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::psi::psi_dense;
use crate::error::{LamnError, Result};
use crate::linalg::{self, spd_inverse, trace_of_product};
use crate::model::{ModelSpec, ProjectionFrame};

/// `𝒯_{k,l,L}(z)_{ij} = tr(∂_i(ψ^{k,k})⁻¹ ψ^{k,l} ∂_j(ψ^{l,l})⁻¹ ψ^{l,k})` at
/// `A = ã ãᵀ(z, θ₀)`, with `∂_i(ψ⁻¹) = −ψ⁻¹ ψ(∂_i A) ψ⁻¹`.
pub fn t_trace(
    z: &DVector<f64>,
    theta0: &DVector<f64>,
    k: u8,
    l: u8,
    big_l: usize,
    spec: &ModelSpec,
    frame: &ProjectionFrame,
) -> Result<DMatrix<f64>> {
    if !(1..=2).contains(&k) || !(1..=2).contains(&l) {
        return Err(LamnError::InvalidArgument(format!("trace kind ({k}, {l}) must lie in {{1, 2}}^2")));
    }
    if big_l < 3 {
        return Err(LamnError::InvalidArgument(format!("t_trace needs L >= 3, got {big_l}")));
    }
    let d = spec.dims.d;
    let a = spec.diffusion_cov(z, theta0);
    let da: Vec<DMatrix<f64>> =
        (0..d).map(|i| spec.diffusion_cov_derivative(z, theta0, i)).collect::<Result<_>>()?;
    let inv_kk = spd_inverse(&psi_dense(&a, frame, k, k, big_l), "psi^{k,k}")?.inverse;
    let inv_ll = if k == l {
        inv_kk.clone()
    } else {
        spd_inverse(&psi_dense(&a, frame, l, l, big_l), "psi^{l,l}")?.inverse
    };
    let psi_kl = psi_dense(&a, frame, k, l, big_l);
    let psi_lk = psi_kl.transpose();
    // M_i = ∂_i(ψ^{k,k})⁻¹ ψ^{k,l}, N_j = ∂_j(ψ^{l,l})⁻¹ ψ^{l,k}
    let ms: Vec<DMatrix<f64>> = da
        .iter()
        .map(|dai| -(&inv_kk * psi_dense(dai, frame, k, k, big_l) * &inv_kk) * &psi_kl)
        .collect();
    let ns: Vec<DMatrix<f64>> = da
        .iter()
        .map(|dai| -(&inv_ll * psi_dense(dai, frame, l, l, big_l) * &inv_ll) * &psi_lk)
        .collect();
    Ok(DMatrix::from_fn(d, d, |i, j| trace_of_product(&ms[i], &ns[j])))
}

/// One row of the convergence table of `L⁻¹ 𝒯_{k,l,L}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GLimitRow {
    #[serde(rename = "L")]
    pub big_l: usize,
    pub k: u8,
    pub l: u8,
    /// Row-major `L⁻¹ 𝒯_{k,l,L}`.
    pub value: Vec<f64>,
    /// `max |L⁻¹ 𝒯_{k,l,L} − g|`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GLimit {
    pub d: usize,
    /// Row-major extrapolated `g`, taken from `(k, l) = (1, 1)`.
    pub g: Vec<f64>,
    pub table: Vec<GLimitRow>,
    /// Largest disagreement between the four extrapolated `(k, l)` limits.
    pub spread: f64,
    pub agree: bool,
    /// Residuals nonincreasing in `L` for every `(k, l)`.
    pub monotone: bool,
}

impl GLimit {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.g)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

/// Extrapolates `L⁻¹ 𝒯_{k,l,L}` to `L → ∞`.
///
/// The limit uses the two largest `L`: with `v(L) ≈ g + c/L`,
/// `g = (L₂ v₂ − L₁ v₁) / (L₂ − L₁)`. Non-monotone residuals are flagged, not
/// fatal.
pub fn g_limit(
    z: &DVector<f64>,
    theta0: &DVector<f64>,
    spec: &ModelSpec,
    frame: &ProjectionFrame,
    l_grid: &[usize],
    tol: f64,
) -> Result<GLimit> {
    if l_grid.len() < 2 || l_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LamnError::InvalidArgument("L grid must be strictly increasing with at least two points".into()));
    }
    if *l_grid.last().unwrap() < 100 {
        return Err(LamnError::InvalidArgument("L grid must reach at least 100".into()));
    }
    let d = spec.dims.d;
    let mut table = Vec::new();
    let mut limits = Vec::new();
    let mut monotone = true;
    for (k, l) in [(1u8, 1u8), (1, 2), (2, 1), (2, 2)] {
        let values: Vec<DMatrix<f64>> = l_grid
            .iter()
            .map(|&big_l| t_trace(z, theta0, k, l, big_l, spec, frame).map(|t| t / big_l as f64))
            .collect::<Result<_>>()?;
        let n = l_grid.len();
        let (l1, l2) = (l_grid[n - 2] as f64, l_grid[n - 1] as f64);
        let g = (&values[n - 1] * l2 - &values[n - 2] * l1) / (l2 - l1);
        let residuals: Vec<f64> = values.iter().map(|v| linalg::max_abs(&(v - &g))).collect();
        if residuals.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-9) + 1e-13) {
            monotone = false;
        }
        for ((&big_l, v), r) in l_grid.iter().zip(&values).zip(&residuals) {
            table.push(GLimitRow { big_l, k, l, value: row_major(v), residual: *r });
        }
        limits.push(g);
    }
    let spread = limits[1..].iter().map(|g| linalg::max_abs(&(g - &limits[0]))).fold(0.0, f64::max);
    let scale = linalg::max_abs(&limits[0]).max(1e-300);
    if !monotone {
        log::warn!("g_limit: residuals are not decreasing in L");
    }
    Ok(GLimit {
        d,
        g: row_major(&limits[0]),
        table,
        spread,
        agree: spread <= tol * scale.max(1.0),
        monotone,
    })
}

/// `g(z)` from `(k, l) = (1, 1)` at two block counts, extrapolated as in
/// [`g_limit`].
pub fn g_point(
    z: &DVector<f64>,
    theta0: &DVector<f64>,
    spec: &ModelSpec,
    frame: &ProjectionFrame,
    l_pair: (usize, usize),
) -> Result<DMatrix<f64>> {
    let (l1, l2) = l_pair;
    if l1 < 3 || l2 <= l1 {
        return Err(LamnError::InvalidArgument(format!("bad L pair ({l1}, {l2})")));
    }
    let v1 = t_trace(z, theta0, 1, 1, l1, spec, frame)?;
    let v2 = t_trace(z, theta0, 1, 1, l2, spec, frame)?;
    Ok((v2 - v1) / (l2 - l1) as f64)
}
