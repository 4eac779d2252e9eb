//! Gaussian quasi-likelihood estimation of the diffusion parameter.


use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockcov::{ktilde_build, psi_dense};
use crate::error::{LamnError, Result};
use crate::information::{gamma_complete, gamma_partial};
use crate::lamn_mc::{default_g_source, McSettings, FAILURE_BUDGET, MIN_PATHS};
use crate::linalg::{self, spd_inverse};
use crate::model::{ModelSpec, ProjectionFrame, SchemeSpec};
use crate::score::{u_v_stats, LocalScore};
use crate::simulate::{
    normalized_increments_complete, observe, partial_blocks, path_seed, rotated_states, simulate_path, Anchor,
    BlockLayout, ObservationSet, PartialBlock,
};
use crate::stats::{Criterion, Summary};

/// Observation data prepared once for repeated objective evaluations.
#[derive(Debug, Clone)]
pub enum QuasiData {
    Complete { states: Vec<DVector<f64>>, increments: Vec<DVector<f64>> },
    Partial { blocks: Vec<PartialBlock>, frame: ProjectionFrame },
}

impl QuasiData {
    pub fn new(obs: &ObservationSet, spec: &ModelSpec, e_n: usize, anchor: Anchor) -> Result<Self> {
        match obs.scheme.partial() {
            None => {
                let mut states = rotated_states(obs, spec)?;
                states.pop();
                Ok(Self::Complete { states, increments: normalized_increments_complete(obs, spec)? })
            }
            Some(scheme) => {
                if e_n < 3 {
                    return Err(LamnError::InvalidArgument(format!("partial schemes need e_n >= 3, got {e_n}")));
                }
                let frame = ProjectionFrame::new(scheme);
                let layout = BlockLayout::new(obs.n, e_n)?;
                let blocks = partial_blocks(obs, &layout, spec, &frame, anchor)?;
                Ok(Self::Partial { blocks, frame })
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Complete { increments, .. } => increments.len(),
            Self::Partial { blocks, .. } => blocks.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first evaluation state.
    fn first_state(&self) -> Option<&DVector<f64>> {
        match self {
            Self::Complete { states, .. } => states.first(),
            Self::Partial { blocks, .. } => blocks.first().map(|b| &b.eval_state),
        }
    }
}

/// `Σ_j [log det K̃(z_{j−1}, θ) + X_jᵀ K̃⁻¹ X_j]` for complete schemes and
/// `Σ_j [log det ψ + X′_jᵀ ψ⁻¹ X′_j]` with `ψ = ψ^{1,1}(ã ãᵀ(Ẏ_j, θ))` for
/// partial ones.
pub fn quasi_nll_prepared(data: &QuasiData, spec: &ModelSpec, theta: &DVector<f64>) -> Result<f64> {
    spec.check_theta(theta)?;
    let terms: Vec<f64> = match data {
        QuasiData::Complete { states, increments } => states
            .iter()
            .zip(increments)
            .map(|(z, x)| {
                let k = ktilde_build(spec, z, theta)?;
                Ok(k.log_det + (&k.inverse * x).dot(x))
            })
            .collect::<Result<_>>()?,
        QuasiData::Partial { blocks, frame } => blocks
            .iter()
            .map(|b| {
                let e_n = b.x_prime.len() / frame.q();
                let psi = psi_dense(&spec.diffusion_cov(&b.eval_state, theta), frame, 1, 1, e_n);
                let inv = spd_inverse(&psi, "psi^{1,1}")?;
                Ok(inv.log_det + (&inv.inverse * &b.x_prime).dot(&b.x_prime))
            })
            .collect::<Result<_>>()?,
    };
    Ok(linalg::pairwise_sum(&terms))
}

pub fn quasi_nll(
    obs: &ObservationSet,
    spec: &ModelSpec,
    scheme: &SchemeSpec,
    theta: &DVector<f64>,
    e_n: usize,
) -> Result<f64> {
    if obs.scheme != *scheme {
        return Err(LamnError::InvalidArgument("observations were taken under a different scheme".into()));
    }
    quasi_nll_prepared(&QuasiData::new(obs, spec, e_n, Anchor::default())?, spec, theta)
}

/// Analytic gradient: `−2 Σ_j ℒ_j` or `−2 Σ_j 𝔘_j`.
pub fn quasi_gradient(data: &QuasiData, spec: &ModelSpec, theta: &DVector<f64>) -> Result<DVector<f64>> {
    spec.check_theta(theta)?;
    let d = spec.dims.d;
    let scores: Vec<DVector<f64>> = match data {
        QuasiData::Complete { states, increments } => states
            .iter()
            .zip(increments)
            .map(|(z, x)| Ok(LocalScore::new(spec, z, theta)?.l(x)))
            .collect::<Result<_>>()?,
        QuasiData::Partial { blocks, frame } => {
            blocks.iter().map(|b| Ok(u_v_stats(b, spec, frame, theta)?.score)).collect::<Result<_>>()?
        }
    };
    Ok(DVector::from_iterator(
        d,
        (0..d).map(|i| -2.0 * linalg::pairwise_sum(&scores.iter().map(|s| s[i]).collect::<Vec<_>>())),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateOptions {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_newton")]
    pub newton_steps: usize,
}

fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    500
}
fn default_newton() -> usize {
    3
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { tol: default_tol(), max_iter: default_max_iter(), newton_steps: default_newton() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

/// Objective wrapper that maps failures and out-of-box points to `+∞`.
fn objective<'a>(data: &'a QuasiData, spec: &'a ModelSpec) -> impl Fn(&DVector<f64>) -> f64 + 'a {
    move |t| match quasi_nll_prepared(data, spec, t) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

fn golden_section(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, max_iter: usize) -> (f64, f64, usize, bool) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iter = 0;
    while (b - a).abs() > tol && iter < max_iter {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        iter += 1;
    }
    let (x, fx) = if fc < fd { (c, fc) } else { (d, fd) };
    (x, fx, iter, (b - a).abs() <= tol)
}

fn project(t: &DVector<f64>, lower: &[f64], upper: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        t.len(),
        t.iter().enumerate().map(|(i, &x)| {
            let margin = 1e-9 * (upper[i] - lower[i]);
            x.clamp(lower[i] + margin, upper[i] - margin)
        }),
    )
}

fn nelder_mead(
    f: &dyn Fn(&DVector<f64>) -> f64,
    start: &DVector<f64>,
    lower: &[f64],
    upper: &[f64],
    opts: &EstimateOptions,
) -> (DVector<f64>, f64, usize, bool) {
    let d = start.len();
    let mut simplex: Vec<DVector<f64>> = vec![start.clone()];
    for i in 0..d {
        let mut p = start.clone();
        let step = 0.1 * (upper[i] - lower[i]);
        p[i] = if p[i] + step < upper[i] { p[i] + step } else { p[i] - step };
        simplex.push(project(&p, lower, upper));
    }
    let mut values: Vec<f64> = simplex.iter().map(f).collect();
    let mut iter = 0;
    let mut converged = false;
    while iter < opts.max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let diameter = simplex[1..].iter().map(|p| (p - &simplex[0]).amax()).fold(0.0, f64::max);
        if diameter < opts.tol {
            converged = true;
            break;
        }
        iter += 1;
        let centroid = simplex[..d].iter().fold(DVector::zeros(d), |acc, p| acc + p) / d as f64;
        let worst = simplex[d].clone();
        let reflect = project(&(&centroid * 2.0 - &worst), lower, upper);
        let fr = f(&reflect);
        if fr < values[0] {
            let expand = project(&(&centroid * 3.0 - &worst * 2.0), lower, upper);
            let fe = f(&expand);
            if fe < fr {
                simplex[d] = expand;
                values[d] = fe;
            } else {
                simplex[d] = reflect;
                values[d] = fr;
            }
        } else if fr < values[d - 1] {
            simplex[d] = reflect;
            values[d] = fr;
        } else {
            let contract = if fr < values[d] {
                project(&((&centroid + &reflect) * 0.5), lower, upper)
            } else {
                project(&((&centroid + &worst) * 0.5), lower, upper)
            };
            let fc = f(&contract);
            if fc < values[d].min(fr) {
                simplex[d] = contract;
                values[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = project(&((&simplex[0] + &simplex[i]) * 0.5), lower, upper);
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best].clone(), values[best], iter, converged)
}

/// Minimizes the quasi-likelihood: golden-section plus Newton polish on the
/// analytic score when `d = 1`, box-projected Nelder–Mead otherwise.
pub fn estimate_prepared(
    data: &QuasiData,
    spec: &ModelSpec,
    theta_init: &DVector<f64>,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    spec.check_theta(theta_init)?;
    if data.is_empty() {
        return Err(LamnError::InvalidArgument("no observations to fit".into()));
    }
    if let Some(z) = data.first_state() {
        if linalg::max_abs(&spec.a_tilde(z, theta_init)) == 0.0 {
            return Err(LamnError::NoInformation(format!("{} has a vanishing diffusion coefficient", spec.name)));
        }
    }
    let f = objective(data, spec);
    let (lower, upper) = (&spec.theta_box.lower, &spec.theta_box.upper);
    let (mut theta, mut value, mut iterations, mut converged) = if spec.dims.d == 1 {
        let margin = 1e-9 * (upper[0] - lower[0]);
        let g = |x: f64| f(&DVector::from_element(1, x));
        let (x, fx, it, ok) = golden_section(&g, lower[0] + margin, upper[0] - margin, opts.tol, opts.max_iter);
        (DVector::from_element(1, x), fx, it, ok)
    } else {
        nelder_mead(&f, theta_init, lower, upper, opts)
    };
    if !value.is_finite() {
        return Err(LamnError::NoInformation("quasi-likelihood is not finite anywhere on the search path".into()));
    }
    if spec.dims.d == 1 {
        for _ in 0..opts.newton_steps {
            let Ok(grad) = quasi_gradient(data, spec, &theta) else { break };
            let h = 1e-5 * theta[0].abs().max(1.0);
            let up = DVector::from_element(1, theta[0] + h);
            let dn = DVector::from_element(1, theta[0] - h);
            let (Ok(gu), Ok(gd)) = (quasi_gradient(data, spec, &up), quasi_gradient(data, spec, &dn)) else { break };
            let curvature = (gu[0] - gd[0]) / (2.0 * h);
            if !(curvature > 0.0) {
                break;
            }
            let candidate = DVector::from_element(1, theta[0] - grad[0] / curvature);
            if !spec.theta_box.contains(&candidate) {
                break;
            }
            let fv = f(&candidate);
            iterations += 1;
            if fv <= value {
                theta = candidate;
                value = fv;
            } else {
                break;
            }
        }
    }
    let gradient_norm = quasi_gradient(data, spec, &theta).map(|g| g.amax()).unwrap_or(f64::NAN);
    if spec.dims.d == 1 && !converged {
        converged = gradient_norm < opts.tol;
    }
    Ok(EstimateReport { theta: theta.iter().copied().collect(), objective: value, iterations, converged, gradient_norm })
}

pub fn estimate(
    obs: &ObservationSet,
    spec: &ModelSpec,
    scheme: &SchemeSpec,
    theta_init: &DVector<f64>,
    e_n: usize,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    if obs.scheme != *scheme {
        return Err(LamnError::InvalidArgument("observations were taken under a different scheme".into()));
    }
    estimate_prepared(&QuasiData::new(obs, spec, e_n, Anchor::default())?, spec, theta_init, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub index: usize,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub model: String,
    pub partial: bool,
    pub n: usize,
    pub paths: usize,
    pub failures: usize,
    pub theta0: Vec<f64>,
    pub mean_theta: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Row-major empirical covariance of `√n(θ̂ − θ₀)`.
    pub covariance: Vec<f64>,
    /// Row-major inverse of the mean reference information.
    pub reference: Vec<f64>,
    pub unconverged: usize,
    pub criteria: Vec<Criterion>,
    pub pass: bool,
    #[serde(skip)]
    pub records: Vec<StudyRecord>,
}

pub fn write_study_csv<W: Write>(records: &[StudyRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = records.first().map_or(0, |r| r.theta_hat.len());
    let mut header = vec!["index".to_string(), "seed".to_string()];
    header.extend((1..=d).map(|i| format!("theta{i}")));
    header.extend(["converged".to_string(), "iterations".to_string()]);
    w.write_record(&header)?;
    for r in records {
        let mut rec = vec![r.index.to_string(), r.seed.to_string()];
        rec.extend(r.theta_hat.iter().map(|v| format!("{v:.16e}")));
        rec.extend([r.converged.to_string(), r.iterations.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Repeats simulate → estimate and compares the covariance of `√n(θ̂ − θ₀)`
/// with the inverse reference information, with relative tolerance `rel`.
pub fn estimator_study(
    spec: &ModelSpec,
    scheme: &SchemeSpec,
    theta0: &DVector<f64>,
    settings: &McSettings,
    opts: &EstimateOptions,
    rel: f64,
) -> Result<StudyReport> {
    spec.check_theta(theta0)?;
    scheme.check_model(spec)?;
    if settings.paths < MIN_PATHS {
        return Err(LamnError::InvalidArgument(format!("need at least {MIN_PATHS} paths, got {}", settings.paths)));
    }
    let d = spec.dims.d;
    let e_n = settings.block_len();
    let frame = scheme.partial().map(ProjectionFrame::new);
    let init = spec.theta_box.center();
    let results: Vec<Result<(StudyRecord, DMatrix<f64>)>> = (0..settings.paths)
        .into_par_iter()
        .map(|i| {
            let seed = path_seed(settings.seed, i as u64);
            let path = simulate_path(spec, theta0, settings.n, settings.substeps, seed)?;
            let obs = observe(&path, spec, scheme, settings.n)?;
            let data = QuasiData::new(&obs, spec, e_n, settings.anchor)?;
            let est = estimate_prepared(&data, spec, &init, opts)?;
            let gamma = match &frame {
                Some(fr) => gamma_partial(&path, spec, fr, theta0, &default_g_source(spec))?.matrix,
                None => gamma_complete(&path, spec, theta0)?.matrix,
            };
            let record =
                StudyRecord { index: i, seed, theta_hat: est.theta, converged: est.converged, iterations: est.iterations };
            Ok((record, gamma))
        })
        .collect();
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => log::warn!("replication failed: {e}"),
        }
    }
    let failures = total - ok.len();
    if failures as f64 > FAILURE_BUDGET * total as f64 {
        return Err(LamnError::FailureBudget { failed: failures, total });
    }
    let count = ok.len() as f64;
    let gammas: Vec<DMatrix<f64>> = ok.iter().map(|(_, g)| g.clone()).collect();
    let gamma = linalg::pairwise_sum_matrices(&gammas, d, d) / count;
    let reference = gamma.clone().try_inverse().ok_or_else(|| {
        LamnError::Singular { what: "reference information".into(), min_sv: linalg::min_singular_value(&gamma) }
    })?;
    let records: Vec<StudyRecord> = ok.into_iter().map(|(r, _)| r).collect();
    let sqrt_n = (settings.n as f64).sqrt();
    let scaled: Vec<DVector<f64>> = records
        .iter()
        .map(|r| (DVector::from_column_slice(&r.theta_hat) - theta0) * sqrt_n)
        .collect();
    let summaries: Vec<Summary> =
        (0..d).map(|i| Summary::of(&records.iter().map(|r| r.theta_hat[i]).collect::<Vec<_>>())).collect();
    let mean_scaled = linalg::pairwise_sum_matrices(
        &scaled.iter().map(|v| DMatrix::from_column_slice(d, 1, v.as_slice())).collect::<Vec<_>>(),
        d,
        1,
    ) / count;
    let outer: Vec<DMatrix<f64>> = scaled
        .iter()
        .map(|v| {
            let c = DMatrix::from_column_slice(d, 1, v.as_slice()) - &mean_scaled;
            &c * c.transpose()
        })
        .collect();
    let covariance = linalg::pairwise_sum_matrices(&outer, d, d) / (count - 1.0);

    let mut criteria = Vec::new();
    for i in 0..d {
        criteria.push(Criterion::within_rel(&format!("variance_{}", i + 1), covariance[(i, i)], reference[(i, i)], rel));
        criteria.push(Criterion::within_se(&format!("bias_{}", i + 1), summaries[i].mean, theta0[i], summaries[i].se));
    }
    let pass = criteria.iter().all(|c| c.pass);
    let row_major = |m: &DMatrix<f64>| m.transpose().iter().copied().collect::<Vec<f64>>();
    Ok(StudyReport {
        model: spec.name.clone(),
        partial: scheme.is_partial(),
        n: settings.n,
        paths: settings.paths,
        failures,
        theta0: theta0.iter().copied().collect(),
        mean_theta: summaries.iter().map(|s| s.mean).collect(),
        mean_se: summaries.iter().map(|s| s.se).collect(),
        covariance: row_major(&covariance),
        reference: row_major(&reference),
        unconverged: records.iter().filter(|r| !r.converged).count(),
        criteria,
        pass,
        records,
    })
}
