//! Randomized identity checks over the block covariances, the score family
//! and the quasi-likelihood gradient.

use lamn_core::blockcov::{ktilde_build, ktilde_dense, psi_build, psi_dense, schur_quadratic, v_matrix};
use lamn_core::linalg::max_abs;
use lamn_core::model::{builtin_model, BuiltinParams, ModelSpec, ProjectionFrame, BUILTIN_NAMES};
use lamn_core::qmle::{quasi_gradient, quasi_nll_prepared, QuasiData};
use lamn_core::score::{b_family, u_v_stats, LocalScore};
use lamn_core::simulate::{observe, simulate_path, Anchor, PartialBlock};
use lamn_core::stats::{Criterion, Summary};
use lamn_core::{LamnError, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub criteria: Vec<Criterion>,
    pub pass: bool,
}

impl CheckReport {
    fn new(name: &str, cases: usize, criteria: Vec<Criterion>) -> Self {
        let pass = criteria.iter().all(|c| c.pass);
        Self { name: name.to_string(), cases, criteria, pass }
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let r = normal_matrix(rng, n, n);
    &r * r.transpose() + DMatrix::identity(n, n) * 0.1
}

fn presets() -> Result<Vec<(ModelSpec, lamn_core::model::SchemeSpec)>> {
    BUILTIN_NAMES.iter().map(|name| builtin_model(name, &BuiltinParams::default())).collect()
}

/// A point `(y, θ)` with `y` standard normal and `θ` in the inner 80% of the box.
fn probe(rng: &mut ChaCha8Rng, spec: &ModelSpec, margin: f64) -> (DVector<f64>, DVector<f64>) {
    let y = DVector::from_fn(spec.dims.m, |_, _| rng.sample(StandardNormal));
    let b = &spec.theta_box;
    let theta = DVector::from_fn(spec.dims.d, |i, _| {
        b.lower[i] + (b.upper[i] - b.lower[i]) * (margin + (1.0 - 2.0 * margin) * rng.random::<f64>())
    });
    (y, theta)
}

/// `ψ^{2,2}_L(A) = V_L ⊗ A` for random SPD `A` and each `L`.
pub fn kronecker(frame: &ProjectionFrame, draws: usize, ls: &[usize], tol: f64, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let a = random_spd(&mut rng, frame.kappa());
        for &l in ls {
            let psi = psi_build(&a, frame, 2, 2, l)?;
            let err = max_abs(&(psi.dense - v_matrix(l).kronecker(&a)));
            worst = worst.max(err);
        }
    }
    Ok(CheckReport::new("kronecker_random", draws * ls.len(), vec![Criterion::within("kronecker_max_abs", worst, 0.0, tol)]))
}

/// Both sides of the partitioned-matrix identity on random partitions, and
/// the unit matrix when `A₁ = A₂`.
pub fn schur(cases: usize, tol: f64, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_unit): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let p = rng.random_range(1..=4);
        let r = rng.random_range(1..=4);
        let full = random_spd(&mut rng, p + r);
        let a1 = full.view((0, 0), (p, p)).into_owned();
        let b = full.view((0, p), (p, r)).into_owned();
        let c = full.view((p, p), (r, r)).into_owned();
        let a2 = random_spd(&mut rng, p);
        let s = schur_quadratic(&a1, &a2, &b, &c)?;
        worst = worst.max(s.discrepancy / max_abs(&s.right).max(1.0));
        let unit = schur_quadratic(&a1, &a1, &b, &c)?;
        worst_unit = worst_unit.max(max_abs(&(unit.left - DMatrix::identity(p, p))));
    }
    Ok(CheckReport::new(
        "schur",
        cases,
        vec![
            Criterion::within("schur_relative", worst, 0.0, tol),
            Criterion::within("schur_equal_blocks_unit", worst_unit, 0.0, tol),
        ],
    ))
}

fn fd4(f: impl Fn(f64) -> DMatrix<f64>, h: f64) -> DMatrix<f64> {
    (f(-2.0 * h) - f(2.0 * h) + (f(h) - f(-h)) * 8.0) / (12.0 * h)
}

/// Blockwise inverse, determinant factorization and `∂K̃ = BK̃ + K̃Bᵀ` for
/// every builtin at `probes` random points.
pub fn ktilde(probes: usize, tol_inverse: f64, tol_det: f64, tol_derivative: f64, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inv_err, mut det_err, mut der_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut cases = 0;
    for (spec, _) in presets()? {
        for _ in 0..probes {
            let (z, theta) = probe(&mut rng, &spec, 0.1);
            let k = ktilde_build(&spec, &z, &theta)?;
            let dense_inv = k.dense.clone().try_inverse().ok_or_else(|| LamnError::Singular {
                what: format!("{} K̃", spec.name),
                min_sv: 0.0,
            })?;
            inv_err = inv_err.max(max_abs(&(&k.inverse - &dense_inv)) / max_abs(&dense_inv).max(1.0));
            let det_dense = k.dense.determinant();
            let det_parts = k.p.determinant() * if k.s.nrows() == 0 { 1.0 } else { k.s.determinant() };
            det_err = det_err.max((det_dense / det_parts - 1.0).abs());

            let b = b_family(&spec, &z, &theta)?;
            let g = spec.grad1_b_check(&z);
            for (i, bi) in b.mats.iter().enumerate() {
                let h = 1e-3 * theta[i].abs().max(1.0);
                let fd = fd4(
                    |s| {
                        let mut t = theta.clone();
                        t[i] += s;
                        ktilde_dense(&spec.diffusion_cov(&z, &t), &g)
                    },
                    h,
                );
                let analytic = bi * &k.dense + &k.dense * bi.transpose();
                der_err = der_err.max(max_abs(&(fd - analytic)) / max_abs(&k.dense).max(1.0));
            }
            cases += 1;
        }
    }
    Ok(CheckReport::new(
        "ktilde",
        cases,
        vec![
            Criterion::within("blockwise_inverse", inv_err, 0.0, tol_inverse),
            Criterion::within("determinant_relative", det_err, 0.0, tol_det),
            Criterion::within("derivative", der_err, 0.0, tol_derivative),
        ],
    ))
}

/// Largest `|mean|/se` of the components and `|mean − target|/se` of the
/// second moments.
fn moment_z(samples: &[DVector<f64>], target: &DMatrix<f64>) -> (f64, f64) {
    let d = target.nrows();
    let (mut first, mut second): (f64, f64) = (0.0, 0.0);
    for i in 0..d {
        let s = Summary::of(&samples.iter().map(|x| x[i]).collect::<Vec<_>>());
        first = first.max(s.mean.abs() / s.se);
        for j in i..d {
            let c = Summary::of(&samples.iter().map(|x| x[i] * x[j]).collect::<Vec<_>>());
            second = second.max((c.mean - target[(i, j)]).abs() / c.se);
        }
    }
    (first, second)
}

fn gaussian(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> DVector<f64> {
    chol * DVector::from_fn(chol.nrows(), |_, _| rng.sample(StandardNormal))
}

/// `E[ℒ] = 0`, `Cov(ℒ) = γ` under `N(0, K̃)` for every builtin, and
/// `E[𝔘] = 0`, `Cov(𝔘) = 𝔙` under `N(0, ψ^{1,1}_{e_n})` for the partial ones.
pub fn moments(draws: usize, e_n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut criteria = Vec::new();
    for (spec, scheme) in presets()? {
        let z = DVector::from_fn(spec.dims.m, |i, _| 0.3 - 0.2 * i as f64);
        let theta = spec.theta_box.center();
        let local = LocalScore::new(&spec, &z, &theta)?;
        let chol = cholesky(&local.ktilde.dense, &spec.name)?;
        let samples: Vec<DVector<f64>> = (0..draws).map(|_| local.l(&gaussian(&mut rng, &chol))).collect();
        let (m1, m2) = moment_z(&samples, &local.gamma());
        criteria.push(Criterion::within(&format!("{}_l_mean_z", spec.name), m1, 0.0, 3.0));
        criteria.push(Criterion::within(&format!("{}_l_cov_z", spec.name), m2, 0.0, 3.0));

        if let Some(p) = scheme.partial() {
            let frame = ProjectionFrame::new(p);
            let psi = psi_dense(&spec.diffusion_cov(&z, &theta), &frame, 1, 1, e_n);
            let chol = cholesky(&psi, &spec.name)?;
            let block = |x: DVector<f64>| PartialBlock {
                j: 0,
                x_prime: x,
                y_dot: z.rows(0, spec.dims.kappa).into_owned(),
                eval_state: z.clone(),
            };
            let variance = u_v_stats(&block(DVector::zeros(chol.nrows())), &spec, &frame, &theta)?.variance;
            let samples: Vec<DVector<f64>> = (0..draws)
                .map(|_| u_v_stats(&block(gaussian(&mut rng, &chol)), &spec, &frame, &theta).map(|s| s.score))
                .collect::<Result<_>>()?;
            let (m1, m2) = moment_z(&samples, &variance);
            criteria.push(Criterion::within(&format!("{}_u_mean_z", spec.name), m1, 0.0, 3.0));
            criteria.push(Criterion::within(&format!("{}_u_cov_z", spec.name), m2, 0.0, 3.0));
        }
    }
    Ok(CheckReport::new("moments", draws, criteria))
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| LamnError::Singular { what: format!("{what} covariance"), min_sv: 0.0 })
}

/// Analytic quasi-likelihood gradient against fourth-order differences at
/// `points` random parameters per builtin.
pub fn gradient(points: usize, tol: f64, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut criteria = Vec::new();
    for (spec, scheme) in presets()? {
        let center = spec.theta_box.center();
        let path = simulate_path(&spec, &center, 60, 2, seed)?;
        let obs = observe(&path, &spec, &scheme, 60)?;
        let data = QuasiData::new(&obs, &spec, 5, Anchor::default())?;
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let (_, theta) = probe(&mut rng, &spec, 0.2);
            let grad = quasi_gradient(&data, &spec, &theta)?;
            for i in 0..spec.dims.d {
                let h = 1e-3 * theta[i].abs().max(1.0);
                let at = |s: f64| {
                    let mut t = theta.clone();
                    t[i] += s;
                    quasi_nll_prepared(&data, &spec, &t)
                };
                let fd = (at(-2.0 * h)? - at(2.0 * h)? + 8.0 * (at(h)? - at(-h)?)) / (12.0 * h);
                worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
            }
        }
        criteria.push(Criterion::within(&format!("{}_gradient", spec.name), worst, 0.0, tol));
    }
    Ok(CheckReport::new("gradient", points, criteria))
}
