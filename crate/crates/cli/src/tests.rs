use super::*;
use std::fs;

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).unwrap()
}

#[test]
fn unknown_keys_are_rejected() {
    let err = ExperimentConfig::from_json(r#"{"model": "langevin", "colour": 3}"#).unwrap_err();
    assert!(matches!(err, LamnError::Parse(_)));
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    let err = ExperimentConfig::from_json(r#"{"model": "langevin", "tolerances": {"loose": 1}}"#).unwrap_err();
    assert!(matches!(err, LamnError::Parse(_)));
}

#[test]
fn paths_alias_and_big_l_names() {
    let a = cfg(r#"{"model": "integrated", "M": 600, "L": 12}"#);
    let b = cfg(r#"{"model": "integrated", "paths": 600, "L": 12}"#);
    assert_eq!(a, b);
    assert_eq!(a.paths, Some(600));
    assert_eq!(a.big_l, Some(12));
}

#[test]
fn command_must_match_the_subcommand() {
    let err = cfg(r#"{"command": "psi", "model": "integrated"}"#).resolve(Command::Info).err().unwrap();
    assert!(matches!(err, LamnError::InvalidArgument(_)));
}

#[test]
fn flags_override_the_file() {
    let mut c = cfg(r#"{"model": "langevin", "n": 100, "seed": 3}"#);
    c.apply(&Overrides { n: Some(250), ..Default::default() });
    let r = c.resolve(Command::Simulate).unwrap();
    assert_eq!(r.n(), 250);
    assert_eq!(r.seed(), 3);
}

#[test]
fn defaults_are_written_out() {
    let r = cfg(r#"{"model": "integrated"}"#).resolve(Command::LamnCheck).unwrap();
    let c = &r.config;
    assert_eq!(c.n, Some(1000));
    assert_eq!(c.paths, Some(1000));
    assert_eq!(c.e_n, Some(7));
    assert_eq!(c.substeps, Some(16));
    assert_eq!(c.seed, Some(0));
    assert_eq!(c.h, Some(vec![1.0]));
    assert_eq!(c.theta0, Some(vec![1.0]));
    assert_eq!(c.tolerances.as_ref().unwrap().variance_rel, Some(0.07));
    let text = c.to_json();
    for key in ["\"n\"", "\"M\"", "\"e_n\"", "\"substeps\"", "\"seed\"", "\"h\"", "\"theta0\"", "\"scheme\""] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
    assert!(!text.contains("output"));
}

#[test]
fn exponential_laws_default_to_zero() {
    let r = cfg(r#"{"model": "factor"}"#).resolve(Command::Info).unwrap();
    assert_eq!(r.config.theta0, Some(vec![0.0]));
}

#[test]
fn manifest_resolves_to_itself() {
    let r = cfg(r#"{"model": "stochvol-diagonal", "n": 300}"#).resolve(Command::Study).unwrap();
    let first = r.config.to_json();
    let again = ExperimentConfig::from_json(&first).unwrap().resolve(Command::Study).unwrap();
    assert_eq!(first, again.config.to_json());
}

#[test]
fn precondition_violations_are_config_errors() {
    let cases = [
        (r#"{"model": "langevin", "M": 20}"#, Command::LamnCheck),
        (r#"{"model": "integrated", "e_n": 2}"#, Command::Estimate),
        (r#"{"model": "integrated", "L": 2}"#, Command::Psi),
        (r#"{"model": "integrated", "k": 3}"#, Command::Psi),
        (r#"{"model": "integrated", "L_grid": [10, 50]}"#, Command::Psi),
        (r#"{"model": "langevin", "h": [1, 2]}"#, Command::LamnCheck),
        (r#"{"model": "langevin", "theta0": [12]}"#, Command::Info),
        (r#"{"model": "langevin", "n": 1}"#, Command::Simulate),
        (r#"{"model": "langevin"}"#, Command::Psi),
        (r#"{"model": "stochvol-diagonal", "checks": ["kronecker"]}"#, Command::Psi),
        (r#"{"model": "nonesuch"}"#, Command::Info),
        (r#"{"model": "stochvol-common"}"#, Command::FactorTwo),
    ];
    for (text, command) in cases {
        let err = cfg(text).resolve(command).err().unwrap_or_else(|| panic!("{text} was accepted"));
        assert_eq!(exit_code(&err), EXIT_CONFIG, "{text}: {err}");
    }
}

#[test]
fn non_projection_q_names_the_invariant() {
    let c = cfg(r#"{"model": "integrated", "scheme": {"kind": "partial", "Q": [[0.5]], "B": [[1.0]]}}"#);
    let err = c.resolve(Command::Psi).err().unwrap();
    assert!(matches!(err, LamnError::InvalidScheme(_)));
    assert!(err.to_string().contains("not a projection"), "{err}");
    assert_eq!(exit_code(&err), EXIT_CONFIG);
}

#[test]
fn numerical_errors_map_to_three() {
    let errs = [
        LamnError::Singular { what: "x".into(), min_sv: 0.0 },
        LamnError::NonFinite("x".into()),
        LamnError::NoInformation("x".into()),
        LamnError::FailureBudget { failed: 9, total: 10 },
    ];
    for e in errs {
        assert_eq!(exit_code(&e), EXIT_NUMERIC);
    }
}

#[test]
fn psi_writes_the_kronecker_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(&format!(r#"{{"model": "integrated", "L": 4, "output": "{}"}}"#, dir.path().display()));
    let (outcome, out) = execute(Command::Psi, c, &Overrides::default(), None).unwrap();
    assert!(outcome.pass());
    assert!(outcome.lines.iter().any(|l| l == "kronecker: pass"));
    let text = fs::read_to_string(out.join("psi.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][0], 1.0 / 3.0);
    assert_eq!(rows[2][2], 2.0 / 3.0);
    assert_eq!(rows[2][3], 1.0 / 6.0);
    assert_eq!(rows[0][2], 0.0);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn simulate_then_estimate_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let c = cfg(r#"{"model": "langevin", "n": 200, "substeps": 2, "seed": 5}"#);
    let overrides = Overrides { output: Some(sim.clone()), ..Default::default() };
    execute(Command::Simulate, c, &overrides, None).unwrap();
    let est = dir.path().join("est");
    let c = cfg(&format!(
        r#"{{"model": "langevin", "observations": "{}", "output": "{}"}}"#,
        sim.join("observations.csv").display(),
        est.display()
    ));
    let (outcome, _) = execute(Command::Estimate, c, &Overrides::default(), None).unwrap();
    assert!(outcome.pass());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(est.join("estimate.json")).unwrap()).unwrap();
    let theta = doc["theta"][0].as_f64().unwrap();
    assert!((theta - 1.0).abs() < 0.25, "{theta}");
    assert_eq!(doc["n"], 200);
}

#[test]
fn estimate_rejects_a_mismatched_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let c = cfg(r#"{"model": "langevin", "n": 50, "substeps": 2}"#);
    execute(Command::Simulate, c, &Overrides { output: Some(sim.clone()), ..Default::default() }, None).unwrap();
    let c = cfg(&format!(
        r#"{{"model": "integrated", "observations": "{}", "output": "{}"}}"#,
        sim.join("observations.csv").display(),
        dir.path().join("est").display()
    ));
    let err = execute(Command::Estimate, c, &Overrides::default(), None).err().unwrap();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: Option<usize>| {
        let out = dir.path().join(name);
        let c = cfg(r#"{"model": "integrated", "n": 60, "M": 500, "substeps": 2, "e_n": 4, "seed": 11}"#);
        execute(Command::LamnCheck, c, &Overrides { output: Some(out.clone()), ..Default::default() }, threads).unwrap();
        ["manifest.json", "report.json", "report.txt", "paths.csv"].map(|f| fs::read(out.join(f)).unwrap())
    };
    let a = run("a", Some(1));
    assert_eq!(a, run("b", Some(1)));
    assert_eq!(a, run("c", Some(3)));
}
