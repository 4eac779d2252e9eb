use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn preset(name: &str) -> (ModelSpec, SchemeSpec) {
    builtin_model(name, &BuiltinParams::default()).unwrap()
}

fn random_probes(spec: &ModelSpec, count: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &spec.theta_box;
    (0..count)
        .map(|_| {
            let y = DVector::from_fn(spec.dims.m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let theta = DVector::from_fn(spec.dims.d, |i, _| {
                let w = b.upper[i] - b.lower[i];
                b.lower[i] + w * (0.01 + 0.98 * rng.random::<f64>())
            });
            (y, theta)
        })
        .collect()
}

#[test]
fn langevin_preset_shape() {
    let (spec, scheme) = preset("langevin");
    assert_eq!(spec.dims, Dims { m: 2, kappa: 1, r: 1, d: 1 });
    assert_eq!(spec.rotation, DMatrix::identity(2, 2));
    assert_eq!(scheme, SchemeSpec::Complete);
    let y = dv(&[0.7, -3.0]);
    assert_eq!(spec.b_check(&y)[0], 0.7);
    assert_eq!(spec.a_tilde(&y, &dv(&[2.5]))[(0, 0)], 2.5);
}

#[test]
fn integrated_preset_scheme() {
    let (spec, scheme) = preset("integrated");
    let p = scheme.partial().unwrap();
    assert_eq!(p.q, DMatrix::zeros(1, 1));
    assert_eq!(p.b, DMatrix::identity(1, 1));
    assert_eq!((p.q1, p.q2), (0, 1));
    assert!(matches!(spec.closed_form(), Some(ClosedForm::PartialG(_))));
}

#[test]
fn factor_closed_form_is_two_m() {
    let (spec, _) = preset("factor");
    assert_eq!(spec.dims, Dims { m: 3, kappa: 2, r: 2, d: 1 });
    let Some(ClosedForm::Complete(f)) = spec.closed_form() else { panic!("factor ships a closed form") };
    // f = exp(θ) gives ∂f/f = 1.
    let v = f(&dv(&[0.3, -0.2, 1.0]), &dv(&[0.4]));
    assert!((v[(0, 0)] - 6.0).abs() < 1e-12);
}

#[test]
fn factor_rotation_zeroes_degenerate_rows() {
    let (spec, _) = preset("factor");
    let y = dv(&[0.2, 0.1, -0.4]);
    let theta = dv(&[0.3]);
    // Original-frame diffusion is Uᵀ (ã; 0); its rank must be kappa.
    let mut full = DMatrix::zeros(3, 2);
    full.view_mut((0, 0), (2, 2)).copy_from(&spec.a_tilde(&y, &theta));
    let raw = spec.rotation.transpose() * &full;
    assert_eq!(linalg::rank(&raw), 2);
    let back = &spec.rotation * raw;
    assert!(back.row(2).amax() < 1e-14);
}

#[test]
fn shared_noise_rotation_matches_raw_coefficients() {
    let (spec, _) = preset("shared-noise");
    let theta = dv(&[1.7]);
    let x = dv(&[0.4, -0.1]);
    let y = spec.to_rotated(&x);
    // Raw diffusion column is c (1, 1) with c = θ.
    let raw_a = dv(&[1.7, 1.7]);
    let rotated = &spec.rotation * raw_a;
    assert!((rotated[0] - spec.a_tilde(&y, &theta)[(0, 0)]).abs() < 1e-14);
    assert!(rotated[1].abs() < 1e-14);
    // e(x, y) = x + y, rotated by 1/√2 onto the second row.
    assert!((spec.b_check(&y)[0] - (x[0] + x[1]) / std::f64::consts::SQRT_2).abs() < 1e-14);
    let Some(ClosedForm::Complete(f)) = spec.closed_form() else { panic!() };
    assert!((f(&y, &theta)[(0, 0)] - 4.0 / (1.7 * 1.7)).abs() < 1e-12);
}

#[test]
fn unknown_name_and_positivity_are_rejected() {
    assert!(matches!(builtin_model("nope", &BuiltinParams::default()), Err(LamnError::UnknownModel(_))));
    let p = BuiltinParams { theta_box: Some(vec![[-1.0, 2.0]]), ..Default::default() };
    assert!(matches!(builtin_model("langevin", &p), Err(LamnError::InvalidModel(_))));
    let p = BuiltinParams { diffusion: Some(ScaleLaw::SineState), theta_box: Some(vec![[0.0, 2.0]]), ..Default::default() };
    assert!(builtin_model("scaled-factor", &p).is_err());
    let p = BuiltinParams { m: Some(5), kappa: Some(2), ..Default::default() };
    assert!(builtin_model("factor", &p).is_err());
    let p = BuiltinParams { loadings: Some(vec![1.0, 2.0, 2.0, 4.0]), ..Default::default() };
    assert!(builtin_model("stochvol-common", &p).is_err());
}

#[test]
fn builder_rejects_bad_rotation_and_dims() {
    let dims = Dims { m: 2, kappa: 1, r: 1, d: 1 };
    let err = ModelSpec::builder("x", dims)
        .a_tilde(|_, t| DMatrix::from_element(1, 1, t[0]))
        .rotation(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]))
        .build();
    assert!(err.is_err());
    let err = ModelSpec::builder("x", Dims { m: 3, kappa: 1, r: 1, d: 1 })
        .a_tilde(|_, t| DMatrix::from_element(1, 1, t[0]))
        .build();
    assert!(err.is_err());
}

#[test]
fn every_builtin_passes_conditions_on_random_probes() {
    for (k, name) in BUILTIN_NAMES.iter().enumerate() {
        let (spec, scheme) = preset(name);
        let probes = random_probes(&spec, 100, 17 + k as u64);
        let report = validate_conditions(&spec, &scheme, &probes).unwrap();
        assert!(report.pass, "{name}: {:?}", report.probes.iter().find(|p| !p.pass));
    }
}

#[test]
fn langevin_probe_has_zero_residuals() {
    let (spec, scheme) = preset("langevin");
    let report = validate_conditions(&spec, &scheme, &[(dv(&[0.3, 1.0]), dv(&[2.0]))]).unwrap();
    let p = &report.probes[0];
    assert_eq!(p.kernel_residual, 0.0);
    assert_eq!(p.drift_kernel_residual, 0.0);
    assert!(p.commutation_residual.is_none());
}

#[test]
fn factor_log_derivative_is_scalar() {
    let (spec, _) = preset("factor");
    let y = dv(&[0.5, -0.3, 0.9]);
    let theta = dv(&[0.2]);
    let a = spec.a_tilde(&y, &theta);
    let da = spec.theta_derivative(Coefficient::ATilde, &y, &theta, 0).unwrap();
    let m = &da * pinv(&a);
    // exp(θ) scale: ∂f/f = 1.
    assert!(linalg::max_abs(&(m - DMatrix::identity(2, 2))) < 1e-12);
}

#[test]
fn stochvol_common_commutes() {
    let (spec, scheme) = preset("stochvol-common");
    let report = validate_conditions(&spec, &scheme, &random_probes(&spec, 5, 3)).unwrap();
    for p in &report.probes {
        assert!(p.commutation_residual.unwrap() < 1e-12);
    }
}

#[test]
fn broken_kernel_model_fails() {
    // ã = (θ, 0) has kernel e₂, but ∂ã = (1, 1) does not vanish on it.
    let spec = ModelSpec::builder("broken", Dims { m: 1, kappa: 1, r: 2, d: 1 })
        .a_tilde(|_, t| DMatrix::from_row_slice(1, 2, &[t[0], 0.0]))
        .d_theta_a(|_, _, _| DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
        .build()
        .unwrap();
    let report = validate_conditions(&spec, &SchemeSpec::Complete, &[(dv(&[0.0]), dv(&[1.0]))]).unwrap();
    assert!(!report.pass);
    let ker = kernel_basis(&spec.a_tilde(&dv(&[0.0]), &dv(&[1.0])));
    let direct = (DMatrix::from_row_slice(1, 2, &[1.0, 1.0]) * ker).amax();
    assert!(report.probes[0].kernel_residual > 1e-3);
    assert!((report.probes[0].kernel_residual - direct).abs() < 1e-12);
}

#[test]
fn theta_derivative_cases() {
    let (spec, _) = preset("langevin");
    let y = dv(&[0.1, 0.2]);
    let fd = spec.theta_derivative_fd(Coefficient::ATilde, &y, &dv(&[3.0]), 0).unwrap();
    assert!((fd[(0, 0)] - 1.0).abs() < 1e-10);
    assert_eq!(spec.theta_derivative(Coefficient::ATilde, &y, &dv(&[3.0]), 0).unwrap()[(0, 0)], 1.0);

    let p = BuiltinParams { diffusion: Some(ScaleLaw::Exp), ..Default::default() };
    let (spec, _) = builtin_model("langevin", &p).unwrap();
    let fd = spec.theta_derivative_fd(Coefficient::ATilde, &y, &dv(&[0.0]), 0).unwrap();
    assert!((fd[(0, 0)] - 1.0).abs() < 1e-10);

    // b̃ = -λ ỹ does not depend on θ.
    let db = spec.theta_derivative(Coefficient::BTilde, &y, &dv(&[0.0]), 0).unwrap();
    assert_eq!(db.shape(), (1, 1));
    assert_eq!(db[(0, 0)], 0.0);
}

#[test]
fn theta_derivative_near_boundary_errors() {
    let (spec, _) = preset("langevin");
    let y = dv(&[0.0, 0.0]);
    let r = spec.theta_derivative_fd(Coefficient::ATilde, &y, &dv(&[0.1 + 1e-7]), 0);
    assert!(matches!(r, Err(LamnError::StepLeavesBox { index: 0 })));
    assert!(spec.theta_derivative(Coefficient::ATilde, &y, &dv(&[1.0]), 1).is_err());
}

#[test]
fn analytic_and_fd_derivatives_agree_on_builtins() {
    for (k, name) in BUILTIN_NAMES.iter().enumerate() {
        let (spec, _) = preset(name);
        for (y, theta) in random_probes(&spec, 20, 100 + k as u64) {
            for i in 0..spec.dims.d {
                let an = spec.theta_derivative(Coefficient::ATilde, &y, &theta, i).unwrap();
                let fd = spec.theta_derivative_fd(Coefficient::ATilde, &y, &theta, i).unwrap();
                let scale = linalg::max_abs(&an).max(1e-300);
                assert!(linalg::max_abs(&(an - fd)) <= 1e-6 * scale.max(1.0), "{name}");
            }
        }
    }
}

#[test]
fn partial_scheme_validation() {
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    assert!(PartialScheme::new(q.clone(), b.clone()).is_ok());
    // Not a projection.
    assert!(PartialScheme::new(q.clone() * 2.0, b.clone()).is_err());
    // Ker(B) = span(e₂) is not inside Im(Q) = span(e₁).
    let b_bad = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    assert!(PartialScheme::new(q, b_bad).is_err());
    // rank Q = kappa.
    assert!(PartialScheme::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).is_err());
    // B Bᵀ singular.
    assert!(PartialScheme::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).is_err());
}

#[test]
fn projection_frame_properties() {
    let s = 0.5_f64.sqrt();
    // Projection onto (1, 1)/√2 in R².
    let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let b = DMatrix::from_row_slice(1, 2, &[s, -s]);
    let scheme = PartialScheme::new(q.clone(), b).unwrap();
    let f1 = ProjectionFrame::new(&scheme);
    let f2 = ProjectionFrame::new(&scheme);
    assert_eq!(f1, f2);
    assert_eq!((f1.q1(), f1.q2(), f1.tail_dim()), (1, 1, 1));
    let g1 = &f1.qt1 * f1.qt1.transpose();
    let g3 = &f1.qt3 * f1.qt3.transpose();
    assert!((g1[(0, 0)] - 1.0).abs() < 1e-14 && (g3[(0, 0)] - 1.0).abs() < 1e-14);
    assert!(linalg::max_abs(&(f1.qt1.transpose() * &f1.qt1 - &q)) < 1e-14);
    assert!(linalg::max_abs(&(f1.qt3.transpose() * &f1.qt3 - (DMatrix::identity(2, 2) - q))) < 1e-14);
    assert!(f1.reconstruction_residual() < 1e-10);
}

#[test]
fn scheme_must_match_model() {
    let (spec, _) = preset("langevin");
    let wrong = SchemeSpec::Partial(
        PartialScheme::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 2.0)).unwrap(),
    );
    assert!(wrong.check_model(&spec).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn theta_box_center_is_inside(l in -10.0..10.0f64, w in 1e-3..10.0f64) {
            let b = ThetaBox::uniform(3, l, l + w).unwrap();
            prop_assert!(b.contains(&b.center()));
        }

        #[test]
        fn scale_law_gradient_matches_difference(x in -2.0..2.0f64, t in 0.5..3.0f64, t2 in -1.0..1.0f64) {
            for law in [ScaleLaw::Scale, ScaleLaw::Exp, ScaleLaw::SqrtState, ScaleLaw::SineState,
                        ScaleLaw::RootSum, ScaleLaw::TwoScale, ScaleLaw::RedundantExp] {
                let th: Vec<f64> = if law.dim() == 2 { vec![t, t2] } else { vec![t] };
                let g = law.gradient(&[x, 0.3], &th);
                for i in 0..law.dim() {
                    let h = 1e-6;
                    let mut up = th.clone();
                    let mut dn = th.clone();
                    up[i] += h;
                    dn[i] -= h;
                    let fd = (law.value(&[x, 0.3], &up) - law.value(&[x, 0.3], &dn)) / (2.0 * h);
                    prop_assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
                }
            }
        }
    }
}

#[test]
fn default_theta_lies_in_every_default_box() {
    for name in BUILTIN_NAMES {
        let (spec, _) = preset(name);
        let theta = builtin_default_theta(name, &BuiltinParams::default()).unwrap();
        assert!(spec.theta_box.contains(&DVector::from_vec(theta)), "{name}");
    }
    assert!(builtin_default_law("nope").is_err());
    let p = BuiltinParams { diffusion: Some(ScaleLaw::TwoScale), ..Default::default() };
    assert_eq!(builtin_default_theta("langevin", &p).unwrap(), vec![1.0, 0.5]);
}
