use super::*;
use crate::blockcov::{ktilde_dense, psi_dense};
use crate::model::{builtin_model, BuiltinParams, Dims, ScaleLaw, SchemeSpec, BUILTIN_NAMES};
use crate::simulate::{observe, partial_blocks, simulate_path, Anchor, BlockLayout};
use crate::stats::Summary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn preset(name: &str) -> (ModelSpec, SchemeSpec) {
    builtin_model(name, &BuiltinParams::default()).unwrap()
}

fn with_law(name: &str, law: ScaleLaw) -> (ModelSpec, SchemeSpec) {
    builtin_model(name, &BuiltinParams { diffusion: Some(law), ..Default::default() }).unwrap()
}

fn probes(spec: &ModelSpec, count: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &spec.theta_box;
    (0..count)
        .map(|_| {
            let y = DVector::from_fn(spec.dims.m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let theta = DVector::from_fn(spec.dims.d, |i, _| {
                let w = b.upper[i] - b.lower[i];
                b.lower[i] + w * (0.1 + 0.8 * rng.random::<f64>())
            });
            (y, theta)
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> DVector<f64> {
    chol * DVector::from_fn(chol.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn theta_free_model() -> ModelSpec {
    ModelSpec::builder("theta-free", Dims { m: 2, kappa: 1, r: 1, d: 1 })
        .a_tilde(|_, _| DMatrix::from_element(1, 1, 1.3))
        .b_check(|y| DVector::from_element(1, y[0]))
        .build()
        .unwrap()
}

#[test]
fn lstat_at_zero_is_minus_trace() {
    let (spec, _) = preset("langevin");
    for theta in [0.5, 1.0, 2.5] {
        let l = lstat(&DVector::zeros(2), &spec.y_ini(), &dv(&[theta]), &spec, 0).unwrap();
        assert!((l + 2.0 / theta).abs() < 1e-12);
    }
    assert!(lstat(&DVector::zeros(3), &spec.y_ini(), &dv(&[1.0]), &spec, 0).is_err());
    assert!(lstat(&DVector::zeros(2), &spec.y_ini(), &dv(&[1.0]), &spec, 1).is_err());
}

#[test]
fn scalar_gamma_is_four_over_theta_squared() {
    let (spec, _) = preset("langevin");
    for theta in [1.0, 2.0] {
        let g = gamma_block(&spec.y_ini(), &dv(&[theta]), &spec).unwrap();
        assert!((g[(0, 0)] - 4.0 / (theta * theta)).abs() < 1e-12);
    }
}

#[test]
fn theta_free_coefficients_give_zero_scores() {
    let spec = theta_free_model();
    let z = dv(&[0.3, -1.0]);
    let local = LocalScore::new(&spec, &z, &dv(&[1.0])).unwrap();
    assert_eq!(local.l(&dv(&[0.4, 2.0]))[0], 0.0);
    assert_eq!(local.gamma()[(0, 0)], 0.0);
}

#[test]
fn expected_l_vanishes_exactly() {
    for name in BUILTIN_NAMES {
        let (spec, _) = preset(name);
        for (z, theta) in probes(&spec, 5, 21) {
            let local = LocalScore::new(&spec, &z, &theta).unwrap();
            for (phi, tb) in local.phi.iter().zip(&local.trace_b) {
                let e = trace_of_product(phi, &local.ktilde.dense) - tb;
                assert!(e.abs() < 1e-9 * tb.abs().max(1.0), "{name}: {e}");
            }
        }
    }
}

fn fd4(f: impl Fn(f64) -> DMatrix<f64>, h: f64) -> DMatrix<f64> {
    (f(-2.0 * h) - f(2.0 * h) + (f(h) - f(-h)) * 8.0) / (12.0 * h)
}

#[test]
fn ktilde_derivative_matches_b_family() {
    for name in BUILTIN_NAMES {
        let (spec, _) = preset(name);
        for (z, theta) in probes(&spec, 50, 22) {
            let b = b_family(&spec, &z, &theta).unwrap();
            let g = spec.grad1_b_check(&z);
            let k = ktilde_dense(&spec.diffusion_cov(&z, &theta), &g);
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
                let analytic = bi * &k + &k * bi.transpose();
                let err = linalg::max_abs(&(&fd - &analytic));
                assert!(err < 1e-9 * linalg::max_abs(&k).max(1.0), "{name} i={i}: {err:e}");
            }
        }
    }
}

#[test]
fn score_is_minus_half_gradient_of_gaussian_contrast() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for name in BUILTIN_NAMES {
        let (spec, _) = preset(name);
        for (z, theta) in probes(&spec, 10, 24) {
            let local = LocalScore::new(&spec, &z, &theta).unwrap();
            let chol = local.ktilde.dense.clone().cholesky().unwrap().l();
            let u = gaussian(&mut rng, &chol);
            let l = local.l(&u);
            for i in 0..spec.dims.d {
                let h = 1e-3 * theta[i].abs().max(1.0);
                let contrast = |s: f64| {
                    let mut t = theta.clone();
                    t[i] += s;
                    let k = ktilde_build(&spec, &z, &t).unwrap();
                    DMatrix::from_element(1, 1, k.log_det + (&k.inverse * &u).dot(&u))
                };
                let grad = fd4(contrast, h)[(0, 0)];
                assert!((grad + 2.0 * l[i]).abs() < 1e-6 * l[i].abs().max(1.0), "{name}: {grad} vs {}", l[i]);
            }
        }
    }
}

fn check_moments(samples: &[DVector<f64>], target: &DMatrix<f64>, what: &str) {
    let d = target.nrows();
    for i in 0..d {
        let xi: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        let s = Summary::of(&xi);
        assert!(s.mean.abs() <= 3.0 * s.se, "{what}: mean {} se {}", s.mean, s.se);
        for j in 0..d {
            let prods: Vec<f64> = samples.iter().map(|s| s[i] * s[j]).collect();
            let c = Summary::of(&prods);
            assert!(
                (c.mean - target[(i, j)]).abs() <= 3.0 * c.se,
                "{what}: cov({i},{j}) = {} vs {} (se {})",
                c.mean,
                target[(i, j)],
                c.se
            );
        }
    }
}

#[test]
fn l_moments_match_gamma_by_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let cases = [
        with_law("langevin", ScaleLaw::TwoScale),
        preset("stochvol-common"),
        preset("factor"),
    ];
    for (spec, _) in cases {
        let z = DVector::from_fn(spec.dims.m, |i, _| 0.3 - 0.2 * i as f64);
        let theta = spec.theta_box.center();
        let local = LocalScore::new(&spec, &z, &theta).unwrap();
        let chol = local.ktilde.dense.clone().cholesky().unwrap().l();
        let samples: Vec<DVector<f64>> = (0..100_000).map(|_| local.l(&gaussian(&mut rng, &chol))).collect();
        check_moments(&samples, &local.gamma(), &spec.name);
    }
}

#[test]
fn u_moments_match_v_by_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for name in ["integrated", "stochvol-common", "stochvol-diagonal"] {
        let (spec, scheme) = preset(name);
        let frame = ProjectionFrame::new(scheme.partial().unwrap());
        let theta = spec.theta_box.center();
        let e_n = 5;
        let z = DVector::from_fn(spec.dims.m, |i, _| 0.1 * i as f64);
        let psi = psi_dense(&spec.diffusion_cov(&z, &theta), &frame, 1, 1, e_n);
        let chol = psi.clone().cholesky().unwrap_or_else(|| panic!("{name}: {psi}")).l();
        let block = |x: DVector<f64>| PartialBlock {
            j: 0,
            x_prime: x,
            y_dot: z.rows(0, spec.dims.kappa).into_owned(),
            eval_state: z.clone(),
        };
        let variance = u_v_stats(&block(DVector::zeros(chol.nrows())), &spec, &frame, &theta).unwrap().variance;
        let samples: Vec<DVector<f64>> = (0..100_000)
            .map(|_| u_v_stats(&block(gaussian(&mut rng, &chol)), &spec, &frame, &theta).unwrap().score)
            .collect();
        check_moments(&samples, &variance, name);
    }
}

#[test]
fn theta_free_partial_stats_vanish() {
    let spec = theta_free_model();
    let scheme = crate::model::PartialScheme::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
    let frame = ProjectionFrame::new(&scheme);
    let block = PartialBlock { j: 3, x_prime: dv(&[0.1, -0.4, 2.0]), y_dot: dv(&[0.0]), eval_state: dv(&[0.0, 1.0]) };
    let s = u_v_stats(&block, &spec, &frame, &dv(&[1.0])).unwrap();
    assert_eq!(s.score[0], 0.0);
    assert_eq!(s.variance[(0, 0)], 0.0);
    assert_eq!(s.j, 3);
}

#[test]
fn u_v_rejects_short_blocks() {
    let (spec, scheme) = preset("integrated");
    let frame = ProjectionFrame::new(scheme.partial().unwrap());
    let block = PartialBlock { j: 0, x_prime: dv(&[0.1, 0.2]), y_dot: dv(&[0.0]), eval_state: dv(&[0.0, 0.0]) };
    assert!(u_v_stats(&block, &spec, &frame, &dv(&[1.0])).is_err());
}

#[test]
fn complete_expansion_on_a_path() {
    let (spec, scheme) = preset("langevin");
    let theta = dv(&[1.0]);
    let path = simulate_path(&spec, &theta, 200, 4, 31).unwrap();
    let obs = observe(&path, &spec, &scheme, 200).unwrap();
    let zero = expansion_complete(&obs, &spec, &theta, &dv(&[0.0])).unwrap();
    assert_eq!(zero.lambda, 0.0);
    let one = expansion_complete(&obs, &spec, &theta, &dv(&[1.0])).unwrap();
    assert_eq!(zero.score_sum, one.score_sum);
    assert_eq!(one.blocks, 200);
    assert!((one.t_sum[0] - 4.0).abs() < 1e-10);
    assert!((one.lambda - (one.score_sum[0] - 2.0)).abs() < 1e-12);
    assert!(expansion_complete(&obs, &spec, &dv(&[100.0]), &dv(&[1.0])).is_err());
    assert!(expansion_complete(&obs, &spec, &theta, &dv(&[1.0, 0.0])).is_err());
}

#[test]
fn partial_expansion_on_a_path() {
    let (spec, scheme) = preset("integrated");
    let frame = ProjectionFrame::new(scheme.partial().unwrap());
    let theta = dv(&[1.0]);
    let n = 1000;
    let path = simulate_path(&spec, &theta, n, 2, 32).unwrap();
    let obs = observe(&path, &spec, &scheme, n).unwrap();
    let layout = BlockLayout::new(n, 7).unwrap();
    let blocks = partial_blocks(&obs, &layout, &spec, &frame, Anchor::Augmented).unwrap();
    let e = expansion_partial(&blocks, n, &spec, &frame, &theta, &dv(&[1.0])).unwrap();
    assert_eq!(e.blocks, layout.l_n);
    // Each block carries 2 e_n units of variance.
    let expect = 2.0 * 7.0 * layout.l_n as f64 / n as f64;
    assert!((e.t_sum[0] - expect).abs() < 1e-10);
    let zero = expansion_partial(&blocks, n, &spec, &frame, &theta, &dv(&[0.0])).unwrap();
    assert_eq!(zero.lambda, 0.0);
    assert!(expansion_partial(&[], n, &spec, &frame, &theta, &dv(&[1.0])).is_err());

    let stats: Vec<ScoreBlock> = blocks.iter().take(3).map(|b| u_v_stats(b, &spec, &frame, &theta).unwrap()).collect();
    let mut buf = Vec::new();
    write_score_blocks_csv(&stats, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("j,score1,trace_variance\n0,"));
    assert_eq!(text.lines().count(), 4);
}
