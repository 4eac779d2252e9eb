//! Asymptotic Fisher information along simulated paths.

#[cfg(test)]
mod tests;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blockcov::g_point;
use crate::error::{LamnError, Result};
use crate::linalg::{self, pairwise_sum_matrices, trace_of_product};
use crate::model::{ClosedForm, ModelSpec, ProjectionFrame};
use crate::simulate::PathSample;

pub const PSD_SLACK: f64 = 1e-10;
const GRID_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClosedForm,
    PathQuadrature,
    PsiLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrix {
    pub matrix: DMatrix<f64>,
    pub provenance: Provenance,
    pub min_eig: f64,
}

#[derive(Serialize, Deserialize)]
struct InfoJson {
    matrix: Vec<Vec<f64>>,
    provenance: Provenance,
    min_eig: f64,
}

impl InfoMatrix {
    pub fn new(matrix: DMatrix<f64>, provenance: Provenance) -> Self {
        let matrix = linalg::symmetrize(&matrix);
        let min_eig = linalg::min_eigenvalue(&matrix);
        Self { matrix, provenance, min_eig }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let rows = (0..self.matrix.nrows()).map(|i| self.matrix.row(i).iter().copied().collect()).collect();
        serde_json::to_value(InfoJson { matrix: rows, provenance: self.provenance, min_eig: self.min_eig })
            .expect("info matrix serializes")
    }
}

impl Serialize for InfoMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json_value().serialize(s)
    }
}

/// The two trace terms of the complete-observation information.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteTerms {
    /// `½∫ tr((aaᵀ)⁺ ∂_i(aaᵀ) (aaᵀ)⁺ ∂_j(aaᵀ)) dt`.
    pub diffusive: DMatrix<f64>,
    /// `½∫ tr(Ψ⁻¹ ∂_iΨ Ψ⁻¹ ∂_jΨ) dt` with `Ψ = (∇₁b̌)ᵀ ã ãᵀ ∇₁b̌`.
    pub integrated: DMatrix<f64>,
}

fn half_trace_gram(inv: &DMatrix<f64>, ds: &[DMatrix<f64>]) -> DMatrix<f64> {
    let ms: Vec<DMatrix<f64>> = ds.iter().map(|d| inv * d).collect();
    let k = ms.len();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = 0.5 * trace_of_product(&ms[i], &ms[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn rotated_path(path: &PathSample, spec: &ModelSpec) -> Result<Vec<DVector<f64>>> {
    if path.states.ncols() != spec.dims.m {
        return Err(LamnError::Dimension("path width does not match the model".into()));
    }
    let steps = path.fine_steps();
    if path.states.nrows() != steps + 1 {
        return Err(LamnError::Dimension("path has the wrong number of rows".into()));
    }
    Ok((0..steps).map(|k| spec.to_rotated(&path.state(k))).collect())
}

fn riemann(values: &[DMatrix<f64>], d: usize) -> DMatrix<f64> {
    pairwise_sum_matrices(values, d, d) / values.len() as f64
}

/// Left-endpoint quadrature of both trace terms on the fine grid.
pub fn gamma_complete_terms(path: &PathSample, spec: &ModelSpec, theta0: &DVector<f64>) -> Result<CompleteTerms> {
    spec.check_theta(theta0)?;
    let d = spec.dims.d;
    let ys = rotated_path(path, spec)?;
    let mut first = Vec::with_capacity(ys.len());
    let mut second = Vec::with_capacity(ys.len());
    for (k, y) in ys.iter().enumerate() {
        let p = spec.diffusion_cov(y, theta0);
        let dp: Vec<DMatrix<f64>> =
            (0..d).map(|i| spec.diffusion_cov_derivative(y, theta0, i)).collect::<Result<_>>()?;
        first.push(half_trace_gram(&linalg::pinv(&p), &dp));
        if spec.is_degenerate() {
            let g = spec.grad1_b_check(y);
            let psi = g.transpose() * &p * &g;
            let sv = linalg::min_singular_value(&psi);
            let inv = psi.clone().try_inverse().filter(|_| sv > 1e-12 * psi.norm()).ok_or_else(|| {
                LamnError::Singular { what: format!("Psi at t = {}", path.fine_time(k)), min_sv: sv }
            })?;
            let dpsi: Vec<DMatrix<f64>> = dp.iter().map(|dpi| g.transpose() * dpi * &g).collect();
            second.push(half_trace_gram(&inv, &dpsi));
        }
    }
    let integrated = if second.is_empty() { DMatrix::zeros(d, d) } else { riemann(&second, d) };
    Ok(CompleteTerms { diffusive: riemann(&first, d), integrated })
}

pub fn gamma_complete(path: &PathSample, spec: &ModelSpec, theta0: &DVector<f64>) -> Result<InfoMatrix> {
    let t = gamma_complete_terms(path, spec, theta0)?;
    Ok(InfoMatrix::new(t.diffusive + t.integrated, Provenance::PathQuadrature))
}

/// Where `g` comes from in [`gamma_partial`].
#[derive(Debug, Clone, PartialEq)]
pub enum GSource {
    /// The model's closed-form `g`.
    ClosedForm,
    /// A constant `g`, e.g. from a `g_limit` convergence table.
    Fixed(DMatrix<f64>),
    /// `g` extrapolated from two block counts on a 64-point grid and
    /// interpolated linearly: over `ỹ` when `kappa = 1`, over time otherwise.
    PsiLimit { l_pair: (usize, usize) },
}

fn lerp_table(knots: &[f64], values: &[DMatrix<f64>], x: f64) -> DMatrix<f64> {
    let last = knots.len() - 1;
    if x <= knots[0] {
        return values[0].clone();
    }
    if x >= knots[last] {
        return values[last].clone();
    }
    let idx = knots.partition_point(|&k| k <= x).min(last).max(1);
    let (x0, x1) = (knots[idx - 1], knots[idx]);
    let w = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
    &values[idx - 1] * (1.0 - w) + &values[idx] * w
}

fn psi_limit_values(
    ys: &[DVector<f64>],
    spec: &ModelSpec,
    frame: &ProjectionFrame,
    theta0: &DVector<f64>,
    l_pair: (usize, usize),
) -> Result<Vec<DMatrix<f64>>> {
    let n = ys.len();
    if spec.dims.kappa == 1 {
        let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y[0]), hi.max(y[0])));
        let anchor = &ys[0];
        let knots: Vec<f64> =
            (0..GRID_POINTS).map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).collect();
        let values: Vec<DMatrix<f64>> = knots
            .iter()
            .map(|&x| {
                let mut z = anchor.clone();
                z[0] = x;
                g_point(&z, theta0, spec, frame, l_pair)
            })
            .collect::<Result<_>>()?;
        Ok(ys.iter().map(|y| lerp_table(&knots, &values, y[0])).collect())
    } else {
        let idx: Vec<usize> = (0..GRID_POINTS).map(|i| i * (n - 1) / (GRID_POINTS - 1)).collect();
        let knots: Vec<f64> = idx.iter().map(|&k| k as f64).collect();
        let values: Vec<DMatrix<f64>> =
            idx.iter().map(|&k| g_point(&ys[k], theta0, spec, frame, l_pair)).collect::<Result<_>>()?;
        Ok((0..n).map(|k| lerp_table(&knots, &values, k as f64)).collect())
    }
}

/// `Γ′ = ½∫ g(Ỹ_t) dt` by left-endpoint quadrature on the fine grid.
pub fn gamma_partial(
    path: &PathSample,
    spec: &ModelSpec,
    frame: &ProjectionFrame,
    theta0: &DVector<f64>,
    source: &GSource,
) -> Result<InfoMatrix> {
    spec.check_theta(theta0)?;
    let d = spec.dims.d;
    let ys = rotated_path(path, spec)?;
    let (values, provenance) = match source {
        GSource::ClosedForm => match spec.closed_form() {
            Some(ClosedForm::PartialG(g)) => (ys.iter().map(|y| g(y, theta0)).collect(), Provenance::PathQuadrature),
            _ => return Err(LamnError::UnknownModel(format!("{} has no closed-form g", spec.name))),
        },
        GSource::Fixed(g) => {
            if g.shape() != (d, d) {
                return Err(LamnError::Dimension(format!("g is {:?}, expected {d}x{d}", g.shape())));
            }
            (vec![g.clone()], Provenance::PsiLimit)
        }
        GSource::PsiLimit { l_pair } => (psi_limit_values(&ys, spec, frame, theta0, *l_pair)?, Provenance::PsiLimit),
    };
    if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(LamnError::NonFinite("g along the path".into()));
    }
    Ok(InfoMatrix::new(riemann(&values, d) * 0.5, provenance))
}

/// The model's own closed form: `∫ f dt` for complete schemes, `½∫ g dt` for
/// partial ones.
pub fn gamma_closed_form(spec: &ModelSpec, path: &PathSample, theta0: &DVector<f64>) -> Result<InfoMatrix> {
    spec.check_theta(theta0)?;
    let ys = rotated_path(path, spec)?;
    let (f, factor) = match spec.closed_form() {
        Some(ClosedForm::Complete(f)) => (f, 1.0),
        Some(ClosedForm::PartialG(g)) => (g, 0.5),
        None => return Err(LamnError::UnknownModel(format!("{} has no closed-form information", spec.name))),
    };
    let values: Vec<DMatrix<f64>> = ys.iter().map(|y| f(y, theta0)).collect();
    Ok(InfoMatrix::new(riemann(&values, spec.dims.d) * factor, Provenance::ClosedForm))
}

/// `(min eigenvalue > PSD_SLACK · max(1, ‖Γ‖_max), min eigenvalue)`.
pub fn check_pd(gamma: &InfoMatrix) -> (bool, f64) {
    let scale = linalg::max_abs(&gamma.matrix).max(1.0);
    (gamma.min_eig > PSD_SLACK * scale, gamma.min_eig)
}
