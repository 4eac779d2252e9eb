//! Monte Carlo checks of the likelihood-ratio expansion.


use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LamnError, Result};
use crate::information::{gamma_closed_form, gamma_complete, gamma_complete_terms, gamma_partial, GSource};
use crate::linalg;
use crate::model::{builtin_model, BuiltinParams, ClosedForm, ModelSpec, ProjectionFrame, SchemeSpec};
use crate::score::{expansion_complete, expansion_diffusive, expansion_partial, Expansion};
use crate::simulate::{
    default_block_len, observe, partial_blocks, path_seed, simulate_path, Anchor, BlockLayout, PathSample,
    DEFAULT_SUBSTEPS,
};
use crate::stats::{ks_normal, Criterion, KsResult, Summary};

pub const MIN_PATHS: usize = 500;
/// Largest tolerated fraction of failed paths.
pub const FAILURE_BUDGET: f64 = 0.01;
pub const KS_LEVEL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    pub n: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Block length for partial schemes; `max(3, round(ln n))` when absent.
    #[serde(default)]
    pub e_n: Option<usize>,
    #[serde(default)]
    pub anchor: Anchor,
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

impl McSettings {
    pub fn new(n: usize, paths: usize, seed: u64) -> Self {
        Self { n, paths, seed, substeps: DEFAULT_SUBSTEPS, e_n: None, anchor: Anchor::default() }
    }

    pub fn block_len(&self) -> usize {
        self.e_n.unwrap_or_else(|| default_block_len(self.n))
    }

    fn check(&self) -> Result<()> {
        if self.paths < MIN_PATHS {
            return Err(LamnError::InvalidArgument(format!("need at least {MIN_PATHS} paths, got {}", self.paths)));
        }
        if self.n < 2 || self.substeps == 0 {
            return Err(LamnError::InvalidArgument("n must be at least 2 and substeps positive".into()));
        }
        Ok(())
    }
}

/// One simulated path's contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub index: usize,
    pub seed: u64,
    pub lambda: f64,
    /// `h · scoreSum`.
    pub score: f64,
    /// `hᵀ TSum h`.
    pub t_h: f64,
    /// `hᵀ Γ h` for the path's own reference information.
    pub gamma_h: f64,
    pub max_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LamnReport {
    pub model: String,
    pub partial: bool,
    pub n: usize,
    pub paths: usize,
    pub failures: usize,
    pub h: Vec<f64>,
    pub seed: u64,
    pub substeps: usize,
    pub e_n: Option<usize>,
    pub lambda: Summary,
    pub exp_lambda: Summary,
    pub score: Summary,
    /// Row-major mean `TSum`.
    pub t_bar: Vec<f64>,
    /// Row-major mean reference information.
    pub gamma: Vec<f64>,
    pub gamma_h: f64,
    pub ks: Option<KsResult>,
    pub max_term: f64,
    pub criteria: Vec<Criterion>,
    pub pass: bool,
    #[serde(skip)]
    pub records: Vec<PathRecord>,
}

impl LamnReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {} ({}), n = {}, paths = {}, failures = {}", self.model,
            if self.partial { "partial" } else { "complete" }, self.n, self.paths, self.failures);
        let _ = writeln!(s, "{:<16} {:>14} {:>14} {:>12}  pass", "criterion", "statistic", "target", "tolerance");
        for c in &self.criteria {
            let _ = writeln!(s, "{:<16} {:>14.6} {:>14.6} {:>12.6}  {}", c.name, c.statistic, c.target, c.tolerance,
                if c.pass { "yes" } else { "no" });
        }
        s
    }
}

/// Per-path records as CSV.
pub fn write_records_csv<W: Write>(records: &[PathRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "seed", "lambda", "score", "t_h", "gamma_h", "max_term"])?;
    for r in records {
        w.write_record([
            r.index.to_string(),
            r.seed.to_string(),
            format!("{:.16e}", r.lambda),
            format!("{:.16e}", r.score),
            format!("{:.16e}", r.t_h),
            format!("{:.16e}", r.gamma_h),
            format!("{:.16e}", r.max_term),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

/// The `g` source used for partial-scheme reference information.
pub fn default_g_source(spec: &ModelSpec) -> GSource {
    match spec.closed_form() {
        Some(ClosedForm::PartialG(_)) => GSource::ClosedForm,
        _ => GSource::PsiLimit { l_pair: (50, 100) },
    }
}

struct Context<'a> {
    spec: &'a ModelSpec,
    scheme: &'a SchemeSpec,
    frame: Option<ProjectionFrame>,
    layout: Option<BlockLayout>,
    settings: &'a McSettings,
}

impl<'a> Context<'a> {
    fn new(spec: &'a ModelSpec, scheme: &'a SchemeSpec, settings: &'a McSettings) -> Result<Self> {
        settings.check()?;
        scheme.check_model(spec)?;
        let frame = scheme.partial().map(ProjectionFrame::new);
        let layout = if scheme.is_partial() {
            let e_n = settings.block_len();
            if e_n < 3 {
                return Err(LamnError::InvalidArgument(format!("partial schemes need e_n >= 3, got {e_n}")));
            }
            Some(BlockLayout::new(settings.n, e_n)?)
        } else {
            None
        };
        Ok(Self { spec, scheme, frame, layout, settings })
    }

    fn path(&self, theta0: &DVector<f64>, index: usize) -> Result<PathSample> {
        let s = self.settings;
        simulate_path(self.spec, theta0, s.n, s.substeps, path_seed(s.seed, index as u64))
    }

    fn expansion(&self, path: &PathSample, theta0: &DVector<f64>, h: &DVector<f64>) -> Result<Expansion> {
        let obs = observe(path, self.spec, self.scheme, self.settings.n)?;
        match (&self.frame, &self.layout) {
            (Some(frame), Some(layout)) => {
                let blocks = partial_blocks(&obs, layout, self.spec, frame, self.settings.anchor)?;
                expansion_partial(&blocks, obs.n, self.spec, frame, theta0, h)
            }
            _ => expansion_complete(&obs, self.spec, theta0, h),
        }
    }

    fn reference(&self, path: &PathSample, theta0: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(match &self.frame {
            Some(frame) => gamma_partial(path, self.spec, frame, theta0, &default_g_source(self.spec))?.matrix,
            None => gamma_complete(path, self.spec, theta0)?.matrix,
        })
    }
}

fn collect_ok<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                log::warn!("path failed: {e}");
            }
        }
    }
    if failed as f64 > FAILURE_BUDGET * total as f64 {
        return Err(LamnError::FailureBudget { failed, total });
    }
    Ok(ok)
}

/// Simulates `paths` independent paths under `θ₀` and aggregates the
/// expansion `Λ̂` at `θ₀ + h/√n`.
pub fn run_lamn_mc(
    spec: &ModelSpec,
    scheme: &SchemeSpec,
    theta0: &DVector<f64>,
    h: &DVector<f64>,
    settings: &McSettings,
    variance_tolerance: f64,
) -> Result<LamnReport> {
    spec.check_theta(theta0)?;
    if h.len() != spec.dims.d {
        return Err(LamnError::Dimension(format!("h has length {}, model has d = {}", h.len(), spec.dims.d)));
    }
    let ctx = Context::new(spec, scheme, settings)?;
    let d = spec.dims.d;
    let results: Vec<Result<(PathRecord, DMatrix<f64>, DMatrix<f64>)>> = (0..settings.paths)
        .into_par_iter()
        .map(|i| {
            let path = ctx.path(theta0, i)?;
            let e = ctx.expansion(&path, theta0, h)?;
            let gamma = ctx.reference(&path, theta0)?;
            let t = e.t_matrix();
            let record = PathRecord {
                index: i,
                seed: path.seed,
                lambda: e.lambda,
                score: h.dot(&DVector::from_column_slice(&e.score_sum)),
                t_h: (&t * h).dot(h),
                gamma_h: (&gamma * h).dot(h),
                max_term: e.max_term,
            };
            Ok((record, t, gamma))
        })
        .collect();
    let ok = collect_ok(results)?;
    let failures = settings.paths - ok.len();
    let records: Vec<PathRecord> = ok.iter().map(|(r, _, _)| r.clone()).collect();
    let ts: Vec<DMatrix<f64>> = ok.iter().map(|(_, t, _)| t.clone()).collect();
    let gs: Vec<DMatrix<f64>> = ok.into_iter().map(|(_, _, g)| g).collect();
    let count = records.len() as f64;
    let t_bar = linalg::pairwise_sum_matrices(&ts, d, d) / count;
    let gamma = linalg::pairwise_sum_matrices(&gs, d, d) / count;
    let gamma_h = (&gamma * h).dot(h);

    let lambdas: Vec<f64> = records.iter().map(|r| r.lambda).collect();
    let lambda = Summary::of(&lambdas);
    let exp_lambda = Summary::of(&lambdas.iter().map(|l| l.exp()).collect::<Vec<_>>());
    let score = Summary::of(&records.iter().map(|r| r.score).collect::<Vec<_>>());
    let ks = (gamma_h > 0.0).then(|| ks_normal(&lambdas, -0.5 * gamma_h, gamma_h.sqrt()));

    let mut criteria = vec![
        Criterion::within_se("mean_lambda", lambda.mean, -0.5 * gamma_h, lambda.se),
        Criterion::within_rel("score_variance", score.var, gamma_h, variance_tolerance),
    ];
    if !scheme.is_partial() {
        criteria.push(Criterion::within_se("exp_lambda", exp_lambda.mean, 1.0, exp_lambda.se));
        if let Some(k) = ks {
            criteria.push(Criterion::at_least("ks_p_value", k.p_value, KS_LEVEL));
        }
    }
    let pass = criteria.iter().all(|c| c.pass);
    Ok(LamnReport {
        model: spec.name.clone(),
        partial: scheme.is_partial(),
        n: settings.n,
        paths: settings.paths,
        failures,
        h: h.iter().copied().collect(),
        seed: settings.seed,
        substeps: settings.substeps,
        e_n: scheme.is_partial().then(|| settings.block_len()),
        lambda,
        exp_lambda,
        score,
        t_bar: row_major(&t_bar),
        gamma: row_major(&gamma),
        gamma_h,
        ks,
        max_term: records.iter().map(|r| r.max_term).fold(0.0, f64::max),
        criteria,
        pass,
        records,
    })
}

/// Score variances of three observation schemes on the same paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTwoReport {
    pub n: usize,
    pub paths: usize,
    pub e_n: usize,
    pub var_joint: f64,
    pub var_diffusive: f64,
    pub var_integrated: f64,
    pub ratio_joint_integrated: f64,
    pub ratio_joint_diffusive: f64,
    /// Closed-form joint Γ over closed-form Γ′ on the first path.
    pub closed_form_ratio: f64,
    /// `(κ + κ′)/κ` from the velocity-observed model's two information terms.
    pub velocity_ratio: f64,
    pub criteria: Vec<Criterion>,
    pub pass: bool,
}

/// Joint `(X, X̄)`, `X`-only and `X̄`-only score variances for the scalar
/// Langevin / integrated pair, with ratio tolerance `rel`.
pub fn factor_two_experiment(theta0: f64, settings: &McSettings, rel: f64) -> Result<FactorTwoReport> {
    let (joint, complete) = builtin_model("langevin", &BuiltinParams::default())?;
    let (integrated, partial) = builtin_model("integrated", &BuiltinParams::default())?;
    let theta = DVector::from_element(1, theta0);
    let h = DVector::from_element(1, 1.0);
    let ctx_joint = Context::new(&joint, &complete, settings)?;
    let ctx_int = Context::new(&integrated, &partial, settings)?;
    let results: Vec<Result<[f64; 3]>> = (0..settings.paths)
        .into_par_iter()
        .map(|i| {
            let path = ctx_joint.path(&theta, i)?;
            let obs = observe(&path, &joint, &complete, settings.n)?;
            let j = expansion_complete(&obs, &joint, &theta, &h)?.score_sum[0];
            let x = expansion_diffusive(&obs, &joint, &theta, &h)?.score_sum[0];
            let y = ctx_int.expansion(&path, &theta, &h)?.score_sum[0];
            Ok([j, x, y])
        })
        .collect();
    let ok = collect_ok(results)?;
    let var = |k: usize| Summary::of(&ok.iter().map(|r| r[k]).collect::<Vec<_>>()).var;
    let (vj, vx, vi) = (var(0), var(1), var(2));

    let first = ctx_joint.path(&theta, 0)?;
    let closed_joint = gamma_closed_form(&joint, &first, &theta)?.matrix[(0, 0)];
    let closed_int = gamma_closed_form(&integrated, &first, &theta)?.matrix[(0, 0)];
    let (velocity, _) = builtin_model("langevin-partial-velocity", &BuiltinParams::default())?;
    let vt = velocity.theta_box.center();
    let vpath = simulate_path(&velocity, &vt, 20, 2, settings.seed)?;
    let terms = gamma_complete_terms(&vpath, &velocity, &vt)?;
    let velocity_ratio = (terms.diffusive[(0, 0)] + terms.integrated[(0, 0)]) / terms.diffusive[(0, 0)];

    let criteria = vec![
        Criterion::within_rel("ratio_joint_integrated", vj / vi, 2.0, rel),
        Criterion::within_rel("ratio_joint_diffusive", vj / vx, 2.0, rel),
        Criterion::within("closed_form_ratio", closed_joint / closed_int, 2.0, 1e-12),
        Criterion::within("velocity_ratio", velocity_ratio, 1.5, 1e-10),
    ];
    let pass = criteria.iter().all(|c| c.pass);
    Ok(FactorTwoReport {
        n: settings.n,
        paths: settings.paths,
        e_n: settings.block_len(),
        var_joint: vj,
        var_diffusive: vx,
        var_integrated: vi,
        ratio_joint_integrated: vj / vi,
        ratio_joint_diffusive: vj / vx,
        closed_form_ratio: closed_joint / closed_int,
        velocity_ratio,
        criteria,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TnRow {
    pub n: usize,
    /// RMS over paths of `‖TSum − Γ‖_F`.
    pub rms: f64,
    pub max_asymmetry: f64,
    pub min_eig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TnTable {
    pub rows: Vec<TnRow>,
    /// RMS nonincreasing in `n` up to 5% slack.
    pub monotone: bool,
    pub psd: bool,
}

/// Convergence of `TSum` to the path's `Γ` for complete observations. Paths
/// are simulated once at the largest `n` and observed at every grid value.
pub fn tn_convergence(
    spec: &ModelSpec,
    theta0: &DVector<f64>,
    n_grid: &[usize],
    paths: usize,
    seed: u64,
    substeps: usize,
) -> Result<TnTable> {
    spec.check_theta(theta0)?;
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LamnError::InvalidArgument("n grid must be strictly increasing".into()));
    }
    if paths == 0 || substeps == 0 {
        return Err(LamnError::InvalidArgument("paths and substeps must be positive".into()));
    }
    let n_max = *n_grid.last().unwrap();
    if n_grid.iter().any(|&n| (n_max * substeps) % n != 0) {
        return Err(LamnError::InvalidArgument("every n must divide the finest grid".into()));
    }
    let d = spec.dims.d;
    let h = DVector::zeros(d);
    let scheme = SchemeSpec::Complete;
    let per_path: Vec<Result<Vec<(f64, f64, f64)>>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let path = simulate_path(spec, theta0, n_max, substeps, path_seed(seed, i as u64))?;
            let gamma = gamma_complete(&path, spec, theta0)?.matrix;
            n_grid
                .iter()
                .map(|&n| {
                    let obs = observe(&path, spec, &scheme, n)?;
                    let t = expansion_complete(&obs, spec, theta0, &h)?.t_matrix();
                    let asym = linalg::max_abs(&(&t - t.transpose()));
                    Ok(((&t - &gamma).norm_squared(), asym, linalg::min_eigenvalue(&t)))
                })
                .collect()
        })
        .collect();
    let per_path: Vec<Vec<(f64, f64, f64)>> = per_path.into_iter().collect::<Result<_>>()?;
    let rows: Vec<TnRow> = n_grid
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let sq: Vec<f64> = per_path.iter().map(|p| p[k].0).collect();
            TnRow {
                n,
                rms: (linalg::pairwise_sum(&sq) / paths as f64).sqrt(),
                max_asymmetry: per_path.iter().map(|p| p[k].1).fold(0.0, f64::max),
                min_eig: per_path.iter().map(|p| p[k].2).fold(f64::INFINITY, f64::min),
            }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].rms <= w[0].rms * 1.05 + 1e-12);
    let psd = rows.iter().all(|r| r.min_eig >= -1e-10);
    Ok(TnTable { rows, monotone, psd })
}
