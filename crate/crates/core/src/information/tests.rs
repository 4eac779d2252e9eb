use super::*;
use crate::model::{builtin_model, BuiltinParams, Dims, ScaleLaw, SchemeSpec, BUILTIN_NAMES};
use crate::simulate::simulate_path;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn model(name: &str, params: BuiltinParams) -> (ModelSpec, SchemeSpec) {
    builtin_model(name, &params).unwrap()
}

fn path_for(spec: &ModelSpec, theta: &DVector<f64>, seed: u64) -> PathSample {
    simulate_path(spec, theta, 50, 4, seed).unwrap()
}

#[test]
fn scalar_complete_information() {
    let (spec, _) = model("langevin", BuiltinParams::default());
    for (theta, expect) in [(1.0, 4.0), (2.0, 1.0)] {
        let t = dv(&[theta]);
        let g = gamma_complete(&path_for(&spec, &t, 1), &spec, &t).unwrap();
        assert!((g.matrix[(0, 0)] - expect).abs() < 1e-12);
        assert_eq!(g.provenance, Provenance::PathQuadrature);
        assert_eq!(check_pd(&g).0, true);
    }
}

#[test]
fn theta_free_information_is_zero() {
    let spec = ModelSpec::builder("theta-free", Dims { m: 2, kappa: 1, r: 1, d: 1 })
        .a_tilde(|_, _| DMatrix::from_element(1, 1, 0.7))
        .b_check(|y| DVector::from_element(1, y[0]))
        .build()
        .unwrap();
    let t = dv(&[1.0]);
    let g = gamma_complete(&path_for(&spec, &t, 2), &spec, &t).unwrap();
    assert_eq!(g.matrix[(0, 0)], 0.0);
    assert_eq!(check_pd(&g), (false, 0.0));
    assert!(gamma_closed_form(&spec, &path_for(&spec, &t, 2), &t).is_err());
}

#[test]
fn partial_velocity_ratio() {
    let (spec, _) = model("langevin-partial-velocity", BuiltinParams::default());
    let t = spec.theta_box.center();
    let terms = gamma_complete_terms(&path_for(&spec, &t, 3), &spec, &t).unwrap();
    let total = &terms.diffusive + &terms.integrated;
    assert!((total[(0, 0)] - 6.0).abs() < 1e-10);
    assert!((terms.diffusive[(0, 0)] - 4.0).abs() < 1e-10);
    assert!((total[(0, 0)] / terms.diffusive[(0, 0)] - 1.5).abs() < 1e-12);
}

#[test]
fn factor_model_gives_two_m() {
    for (m, kappa) in [(3, 2), (4, 2), (5, 3), (6, 5)] {
        let (spec, _) = model("factor", BuiltinParams { m: Some(m), kappa: Some(kappa), ..Default::default() });
        let t = spec.theta_box.center();
        let g = gamma_complete(&path_for(&spec, &t, 4), &spec, &t).unwrap();
        assert!((g.matrix[(0, 0)] - 2.0 * m as f64).abs() < 1e-9, "m={m}: {}", g.matrix);
    }
}

#[test]
fn complete_routes_agree_for_every_builtin() {
    for name in BUILTIN_NAMES {
        let (spec, scheme) = model(name, BuiltinParams::default());
        let t = spec.theta_box.center();
        let path = path_for(&spec, &t, 5);
        let closed = gamma_closed_form(&spec, &path, &t).unwrap();
        assert_eq!(closed.provenance, Provenance::ClosedForm);
        assert!(closed.min_eig >= -PSD_SLACK);
        if scheme.is_partial() {
            let frame = ProjectionFrame::new(scheme.partial().unwrap());
            let psi = gamma_partial(&path, &spec, &frame, &t, &GSource::PsiLimit { l_pair: (50, 100) }).unwrap();
            let rel = linalg::max_abs(&(&psi.matrix - &closed.matrix)) / linalg::max_abs(&closed.matrix);
            assert!(rel < 0.02, "{name}: {} vs {}", psi.matrix, closed.matrix);
        } else {
            let quad = gamma_complete(&path, &spec, &t).unwrap();
            let rel = linalg::max_abs(&(&quad.matrix - &closed.matrix)) / linalg::max_abs(&closed.matrix);
            assert!(rel < 1e-9, "{name}: {} vs {}", quad.matrix, closed.matrix);
            let terms = gamma_complete_terms(&path, &spec, &t).unwrap();
            assert!(linalg::min_eigenvalue(&terms.diffusive) >= -PSD_SLACK);
            assert!(linalg::min_eigenvalue(&terms.integrated) >= -PSD_SLACK);
        }
    }
}

#[test]
fn integrated_partial_information_is_two() {
    let (spec, scheme) = model("integrated", BuiltinParams::default());
    let frame = ProjectionFrame::new(scheme.partial().unwrap());
    let t = dv(&[1.0]);
    let path = path_for(&spec, &t, 6);
    for source in [GSource::ClosedForm, GSource::Fixed(DMatrix::from_element(1, 1, 4.0)), GSource::PsiLimit { l_pair: (50, 100) }] {
        let g = gamma_partial(&path, &spec, &frame, &t, &source).unwrap();
        assert!((g.matrix[(0, 0)] - 2.0).abs() < 1e-8, "{source:?}: {}", g.matrix);
    }
    assert!(gamma_partial(&path, &spec, &frame, &t, &GSource::Fixed(DMatrix::zeros(2, 2))).is_err());
}

#[test]
fn factor_of_two_chain_on_one_path() {
    let (joint, _) = model("langevin", BuiltinParams::default());
    let (integrated, scheme) = model("integrated", BuiltinParams::default());
    let frame = ProjectionFrame::new(scheme.partial().unwrap());
    let t = dv(&[1.0]);
    let path = path_for(&joint, &t, 7);
    let full = gamma_complete_terms(&path, &joint, &t).unwrap();
    let gamma = (&full.diffusive + &full.integrated)[(0, 0)];
    let partial = gamma_partial(&path, &integrated, &frame, &t, &GSource::PsiLimit { l_pair: (50, 100) }).unwrap();
    assert!((gamma - 2.0 * partial.matrix[(0, 0)]).abs() < 1e-9);
    assert!((gamma - 2.0 * full.diffusive[(0, 0)]).abs() < 1e-9);
}

#[test]
fn state_dependent_g_routes_agree() {
    let params = BuiltinParams { diffusion: Some(ScaleLaw::RootSum), ..Default::default() };
    let (spec, scheme) = model("integrated", params);
    let frame = ProjectionFrame::new(scheme.partial().unwrap());
    let t = dv(&[0.8]);
    let path = simulate_path(&spec, &t, 100, 8, 9).unwrap();
    let closed = gamma_partial(&path, &spec, &frame, &t, &GSource::ClosedForm).unwrap();
    let psi = gamma_partial(&path, &spec, &frame, &t, &GSource::PsiLimit { l_pair: (100, 200) }).unwrap();
    let rel = (psi.matrix[(0, 0)] - closed.matrix[(0, 0)]).abs() / closed.matrix[(0, 0)];
    assert!(rel < 0.02, "{} vs {}", psi.matrix, closed.matrix);
}

#[test]
fn stochvol_common_partial_information_is_four() {
    let (spec, scheme) = model("stochvol-common", BuiltinParams::default());
    let frame = ProjectionFrame::new(scheme.partial().unwrap());
    let t = spec.theta_box.center();
    let path = path_for(&spec, &t, 10);
    let g = gamma_closed_form(&spec, &path, &t).unwrap();
    assert!((g.matrix[(0, 0)] - 4.0).abs() < 1e-10);
    let psi = gamma_partial(&path, &spec, &frame, &t, &GSource::PsiLimit { l_pair: (50, 100) }).unwrap();
    assert!((psi.matrix[(0, 0)] - 4.0).abs() < 1e-6);
}

#[test]
fn redundant_parametrization_is_singular() {
    let params = BuiltinParams { diffusion: Some(ScaleLaw::RedundantExp), ..Default::default() };
    let (spec, _) = model("langevin", params);
    let t = spec.theta_box.center();
    let g = gamma_complete(&path_for(&spec, &t, 11), &spec, &t).unwrap();
    let (ok, min_eig) = check_pd(&g);
    assert!(!ok);
    assert!(min_eig.abs() < 1e-10);
    assert!(linalg::max_abs(&(&g.matrix - g.matrix.transpose())) < 1e-12);
}

#[test]
fn info_json_shape() {
    let g = InfoMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]), Provenance::PsiLimit);
    let v = serde_json::to_value(&g).unwrap();
    assert_eq!(v["provenance"], "psi-limit");
    assert_eq!(v["matrix"][0][1], 1.0);
    assert!((v["min_eig"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn rejects_out_of_box_parameters() {
    let (spec, _) = model("langevin", BuiltinParams::default());
    let path = path_for(&spec, &dv(&[1.0]), 12);
    assert!(matches!(gamma_complete(&path, &spec, &dv(&[-1.0])), Err(LamnError::OutOfBox { .. })));
}
