//! Quadratic-form score statistics and log-likelihood-ratio expansions.

#[cfg(test)]
mod tests;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blockcov::{ktilde_build, psi_dense, KTilde};
use crate::error::{LamnError, Result};
use crate::linalg::{self, pairwise_sum, pairwise_sum_matrices, spd_inverse, trace_of_product};
use crate::model::{Coefficient, ModelSpec, ProjectionFrame};
use crate::simulate::{normalized_increments_complete, rotated_states, ObservationSet, PartialBlock};

/// `B_{i,θ} = diag(∂_{θ_i}ã ã⁺, Gᵀ ∂_{θ_i}ã ã⁺ G (GᵀG)⁻¹)` with `G = ∇₁b̌`.
#[derive(Debug, Clone, PartialEq)]
pub struct BFamily {
    pub z0: DVector<f64>,
    pub theta: DVector<f64>,
    pub mats: Vec<DMatrix<f64>>,
}

pub fn b_family(spec: &ModelSpec, z0: &DVector<f64>, theta: &DVector<f64>) -> Result<BFamily> {
    let kappa = spec.dims.kappa;
    let m = spec.dims.m;
    let rest = m - kappa;
    let a_pinv = linalg::pinv(&spec.a_tilde(z0, theta));
    let (g, gtg_inv) = if rest > 0 {
        let g = spec.grad1_b_check(z0);
        let gtg = g.transpose() * &g;
        let sv = linalg::min_singular_value(&gtg);
        let inv = gtg
            .try_inverse()
            .filter(|_| sv > 0.0)
            .ok_or_else(|| LamnError::Singular { what: "(grad b_check)^T grad b_check".into(), min_sv: sv })?;
        (g, inv)
    } else {
        (DMatrix::zeros(kappa, 0), DMatrix::zeros(0, 0))
    };
    let mats = (0..spec.dims.d)
        .map(|i| {
            let bt = spec.theta_derivative(Coefficient::ATilde, z0, theta, i)? * &a_pinv;
            let mut b = DMatrix::zeros(m, m);
            if rest > 0 {
                let c = g.transpose() * &bt * &g * &gtg_inv;
                b.view_mut((kappa, kappa), (rest, rest)).copy_from(&c);
            }
            b.view_mut((0, 0), (kappa, kappa)).copy_from(&bt);
            Ok(b)
        })
        .collect::<Result<_>>()?;
    Ok(BFamily { z0: z0.clone(), theta: theta.clone(), mats })
}

/// `K̃`, `B` and `Φ_i = (B_iᵀK̃⁻¹ + K̃⁻¹B_i)/2` at one evaluation point.
#[derive(Debug, Clone)]
pub struct LocalScore {
    pub ktilde: KTilde,
    pub b: BFamily,
    pub phi: Vec<DMatrix<f64>>,
    pub trace_b: Vec<f64>,
}

impl LocalScore {
    pub fn new(spec: &ModelSpec, z0: &DVector<f64>, theta: &DVector<f64>) -> Result<Self> {
        let ktilde = ktilde_build(spec, z0, theta)?;
        let b = b_family(spec, z0, theta)?;
        Ok(Self::from_parts(ktilde, b))
    }

    /// The same statistics for the diffusive coordinates alone: `K̃ = ã ãᵀ`
    /// and `B_i = ∂_{θ_i}ã ã⁺`.
    pub fn diffusive(spec: &ModelSpec, z0: &DVector<f64>, theta: &DVector<f64>) -> Result<Self> {
        let kappa = spec.dims.kappa;
        let ktilde = crate::blockcov::ktilde_from_parts(&spec.diffusion_cov(z0, theta), &DMatrix::zeros(kappa, 0))?;
        let a_pinv = linalg::pinv(&spec.a_tilde(z0, theta));
        let mats = (0..spec.dims.d)
            .map(|i| Ok(spec.theta_derivative(Coefficient::ATilde, z0, theta, i)? * &a_pinv))
            .collect::<Result<_>>()?;
        Ok(Self::from_parts(ktilde, BFamily { z0: z0.clone(), theta: theta.clone(), mats }))
    }

    fn from_parts(ktilde: KTilde, b: BFamily) -> Self {
        let phi = b
            .mats
            .iter()
            .map(|bi| {
                let right = &ktilde.inverse * bi;
                (right.transpose() + right) * 0.5
            })
            .collect();
        let trace_b = b.mats.iter().map(|bi| bi.trace()).collect();
        Self { ktilde, b, phi, trace_b }
    }

    /// `ℒ_i(u) = uᵀ B_iᵀ K̃⁻¹ u − tr B_i` for every `i`.
    pub fn l(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.phi.len(),
            self.phi.iter().zip(&self.trace_b).map(|(p, t)| (p * u).dot(u) - t),
        )
    }

    /// `γ_{ii'} = 2 tr(Φ_i K̃ Φ_{i'} K̃)`.
    pub fn gamma(&self) -> DMatrix<f64> {
        let pk: Vec<DMatrix<f64>> = self.phi.iter().map(|p| p * &self.ktilde.dense).collect();
        let d = pk.len();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = 2.0 * trace_of_product(&pk[i], &pk[j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

pub fn lstat(u: &DVector<f64>, z0: &DVector<f64>, theta: &DVector<f64>, spec: &ModelSpec, i: usize) -> Result<f64> {
    if i >= spec.dims.d {
        return Err(LamnError::InvalidArgument(format!("parameter index {i} >= d = {}", spec.dims.d)));
    }
    if u.len() != spec.dims.m {
        return Err(LamnError::Dimension(format!("u has length {}, model has m = {}", u.len(), spec.dims.m)));
    }
    Ok(LocalScore::new(spec, z0, theta)?.l(u)[i])
}

pub fn gamma_block(z0: &DVector<f64>, theta0: &DVector<f64>, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    Ok(LocalScore::new(spec, z0, theta0)?.gamma())
}

/// One block's score vector and conditional variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBlock {
    pub j: usize,
    pub score: DVector<f64>,
    pub variance: DMatrix<f64>,
    pub eval_state: DVector<f64>,
}

/// `Λ̂ = h·scoreSum − ½ hᵀ TSum h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub lambda: f64,
    pub score_sum: Vec<f64>,
    /// Row-major `d × d`.
    pub t_sum: Vec<f64>,
    pub blocks: usize,
    /// `max_j |h·η_j| / √n`, a Lindeberg diagnostic.
    pub max_term: f64,
}

impl Expansion {
    pub fn t_matrix(&self) -> DMatrix<f64> {
        let d = self.score_sum.len();
        DMatrix::from_row_slice(d, d, &self.t_sum)
    }
}

fn assemble(scores: &[DVector<f64>], vars: &[DMatrix<f64>], h: &DVector<f64>, n: usize) -> Expansion {
    let d = h.len();
    let nf = n as f64;
    let score_sum: Vec<f64> = (0..d)
        .map(|i| pairwise_sum(&scores.iter().map(|s| s[i]).collect::<Vec<_>>()) / nf.sqrt())
        .collect();
    let t = pairwise_sum_matrices(vars, d, d) / nf;
    let lambda = h.dot(&DVector::from_column_slice(&score_sum)) - 0.5 * (&t * h).dot(h);
    let max_term = scores.iter().map(|s| h.dot(s).abs()).fold(0.0, f64::max) / nf.sqrt();
    Expansion {
        lambda,
        score_sum,
        t_sum: t.transpose().iter().copied().collect(),
        blocks: scores.len(),
        max_term,
    }
}

fn check_h(spec: &ModelSpec, theta0: &DVector<f64>, h: &DVector<f64>) -> Result<()> {
    spec.check_theta(theta0)?;
    if h.len() != spec.dims.d {
        return Err(LamnError::Dimension(format!("h has length {}, model has d = {}", h.len(), spec.dims.d)));
    }
    Ok(())
}

/// Complete-observation expansion with `G_j` evaluated at the rotated previous
/// observation.
pub fn expansion_complete(
    obs: &ObservationSet,
    spec: &ModelSpec,
    theta0: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<Expansion> {
    check_h(spec, theta0, h)?;
    let ys = rotated_states(obs, spec)?;
    let xs = normalized_increments_complete(obs, spec)?;
    let mut scores = Vec::with_capacity(xs.len());
    let mut vars = Vec::with_capacity(xs.len());
    for (z0, x) in ys.iter().zip(&xs) {
        let local = LocalScore::new(spec, z0, theta0)?;
        scores.push(local.l(x));
        vars.push(local.gamma());
    }
    Ok(assemble(&scores, &vars, h, obs.n))
}

/// Complete-observation expansion that keeps only the diffusive coordinates
/// of each increment.
pub fn expansion_diffusive(
    obs: &ObservationSet,
    spec: &ModelSpec,
    theta0: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<Expansion> {
    check_h(spec, theta0, h)?;
    let kappa = spec.dims.kappa;
    let ys = rotated_states(obs, spec)?;
    let xs = normalized_increments_complete(obs, spec)?;
    let mut scores = Vec::with_capacity(xs.len());
    let mut vars = Vec::with_capacity(xs.len());
    for (z0, x) in ys.iter().zip(&xs) {
        let local = LocalScore::diffusive(spec, z0, theta0)?;
        scores.push(local.l(&x.rows(0, kappa).into_owned()));
        vars.push(local.gamma());
    }
    Ok(assemble(&scores, &vars, h, obs.n))
}

/// `𝔘_j` and `𝔙_j` for one partial block, with `ψ = ψ^{1,1}_{e_n}(ã ãᵀ)` at
/// the block's evaluation state.
pub fn u_v_stats(
    block: &PartialBlock,
    spec: &ModelSpec,
    frame: &ProjectionFrame,
    theta0: &DVector<f64>,
) -> Result<ScoreBlock> {
    let q = frame.q();
    if q == 0 || block.x_prime.len() % q != 0 {
        return Err(LamnError::Dimension("block length is not a multiple of the slot width".into()));
    }
    let e_n = block.x_prime.len() / q;
    if e_n < 3 {
        return Err(LamnError::InvalidArgument(format!("partial blocks need e_n >= 3, got {e_n}")));
    }
    let z = &block.eval_state;
    let a = spec.diffusion_cov(z, theta0);
    let inv = spd_inverse(&psi_dense(&a, frame, 1, 1, e_n), "psi^{1,1}")?.inverse;
    let d = spec.dims.d;
    // Each M_i = ψ⁻¹ ψ(∂_i A).
    let ms: Vec<DMatrix<f64>> = (0..d)
        .map(|i| Ok(&inv * psi_dense(&spec.diffusion_cov_derivative(z, theta0, i)?, frame, 1, 1, e_n)))
        .collect::<Result<_>>()?;
    let w = &inv * &block.x_prime;
    let score = DVector::from_iterator(d, ms.iter().map(|mi| 0.5 * ((mi * &w).dot(&block.x_prime) - mi.trace())));
    let mut variance = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = 0.5 * trace_of_product(&ms[i], &ms[j]);
            variance[(i, j)] = v;
            variance[(j, i)] = v;
        }
    }
    Ok(ScoreBlock { j: block.j, score, variance, eval_state: z.clone() })
}

/// Partial-observation expansion over the blocks `j = 0..L_n−1`.
pub fn expansion_partial(
    blocks: &[PartialBlock],
    n: usize,
    spec: &ModelSpec,
    frame: &ProjectionFrame,
    theta0: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<Expansion> {
    check_h(spec, theta0, h)?;
    if blocks.is_empty() {
        return Err(LamnError::InvalidArgument("no partial blocks".into()));
    }
    let stats: Vec<ScoreBlock> = blocks.iter().map(|b| u_v_stats(b, spec, frame, theta0)).collect::<Result<_>>()?;
    let scores: Vec<DVector<f64>> = stats.iter().map(|s| s.score.clone()).collect();
    let vars: Vec<DMatrix<f64>> = stats.into_iter().map(|s| s.variance).collect();
    Ok(assemble(&scores, &vars, h, n))
}

/// Per-block diagnostics: `j`, the score components and `tr 𝔙_j`.
pub fn write_score_blocks_csv<W: Write>(blocks: &[ScoreBlock], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = blocks.first().map_or(0, |b| b.score.len());
    let mut header = vec!["j".to_string()];
    header.extend((1..=d).map(|i| format!("score{i}")));
    header.push("trace_variance".into());
    w.write_record(&header)?;
    for b in blocks {
        let mut rec = vec![b.j.to_string()];
        rec.extend(b.score.iter().map(|v| format!("{v:.16e}")));
        rec.push(format!("{:.16e}", b.variance.trace()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
