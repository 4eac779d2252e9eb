//! One function per subcommand. Each writes its artifacts into the output
//! directory and returns the criteria it checked.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use lamn_core::blockcov::{g_limit, psi_build, v_matrix, write_matrix_csv, GLimit};
use lamn_core::information::{
    check_pd, gamma_closed_form, gamma_complete, gamma_complete_terms, gamma_partial, GSource, InfoMatrix,
};
use lamn_core::lamn_mc::{factor_two_experiment, run_lamn_mc, write_records_csv};
use lamn_core::linalg::max_abs;
use lamn_core::model::{ClosedForm, ProjectionFrame, SchemeDocument, SchemeSpec};
use lamn_core::qmle::{estimate_prepared, estimator_study, write_study_csv, EstimateReport, QuasiData};
use lamn_core::simulate::{
    observe, read_observations_csv, simulate_path, write_observations_csv, write_path_csv, ObservationSet,
    ObservationSidecar, PathSidecar,
};
use lamn_core::stats::Criterion;
use lamn_core::{LamnError, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use crate::checks::{self, CheckReport};
use crate::config::{Check, Command, Resolved};

/// What a command reports back to the driver.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub criteria: Vec<Criterion>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }

    fn push_criteria(&mut self, cs: &[Criterion]) {
        self.criteria.extend(cs.iter().cloned());
    }
}

pub fn criterion_line(c: &Criterion) -> String {
    format!(
        "{}: {} (statistic {:.6e}, target {:.6e}, tolerance {:.3e})",
        c.name,
        if c.pass { "pass" } else { "FAIL" },
        c.statistic,
        c.target,
        c.tolerance
    )
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn frame_of(scheme: &SchemeSpec) -> Result<ProjectionFrame> {
    scheme
        .partial()
        .map(ProjectionFrame::new)
        .ok_or_else(|| LamnError::InvalidScheme("this command needs a partial observation scheme".into()))
}

pub fn run(r: &Resolved, out: &Path) -> Result<Outcome> {
    match r.command {
        Command::Simulate => simulate(r, out),
        Command::Psi => psi(r, out),
        Command::Info => info(r, out),
        Command::LamnCheck => lamn_check(r, out),
        Command::FactorTwo => factor_two(r, out),
        Command::Estimate => estimate(r, out),
        Command::Study => study(r, out),
    }
}

fn simulated(r: &Resolved) -> Result<(lamn_core::simulate::PathSample, ObservationSet)> {
    let path = simulate_path(&r.spec, &r.theta0(), r.n(), r.substeps(), r.seed())?;
    let obs = observe(&path, &r.spec, &r.scheme, r.n())?;
    Ok((path, obs))
}

fn simulate(r: &Resolved, out: &Path) -> Result<Outcome> {
    let (path, obs) = simulated(r)?;
    write_path_csv(&path, create(&out.join("path.csv"))?)?;
    write_json(&out.join("path.json"), &PathSidecar::of(&path))?;
    write_observations_csv(&obs, create(&out.join("observations.csv"))?)?;
    let sidecar = ObservationSidecar {
        model: path.model.clone(),
        seed: path.seed,
        n: obs.n,
        substeps: path.substeps,
        theta: path.theta.clone(),
        scheme: SchemeDocument::from_scheme(&obs.scheme),
    };
    write_json(&out.join("observations.json"), &sidecar)?;
    Ok(Outcome {
        lines: vec![format!("simulated {} fine steps, {} observations", path.fine_steps(), obs.n + 1)],
        criteria: vec![],
    })
}

fn write_g_limit_csv(g: &GLimit, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["L".to_string(), "k".to_string(), "l".to_string()];
    header.extend((0..g.d * g.d).map(|i| format!("v{}{}", i / g.d + 1, i % g.d + 1)));
    header.push("residual".into());
    w.write_record(&header)?;
    for row in &g.table {
        let mut rec = vec![row.big_l.to_string(), row.k.to_string(), row.l.to_string()];
        rec.extend(row.value.iter().map(|v| format!("{v:.16e}")));
        rec.push(format!("{:.16e}", row.residual));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn psi(r: &Resolved, out: &Path) -> Result<Outcome> {
    let c = &r.config;
    let tol = r.tolerances();
    let frame = frame_of(&r.scheme)?;
    let theta0 = r.theta0();
    let y0 = r.spec.y_ini();
    let a = r.spec.diffusion_cov(&y0, &theta0);
    let big_l = c.big_l.unwrap();
    let psi = psi_build(&a, &frame, c.k.unwrap(), c.l.unwrap(), big_l)?;
    write_matrix_csv(&psi.dense, create(&out.join("psi.csv"))?)?;

    let mut outcome = Outcome::default();
    outcome.lines.push(format!("psi^{{{},{}}}_{big_l}: {} x {}", psi.k, psi.l, psi.dense.nrows(), psi.dense.ncols()));
    let checks = c.checks.clone().unwrap_or_default();
    let mut reports: Vec<CheckReport> = Vec::new();
    let seed = r.seed();
    if checks.contains(&Check::Kronecker) {
        let own = psi_build(&a, &frame, 2, 2, big_l)?;
        let err = max_abs(&(own.dense - v_matrix(big_l).kronecker(&a)));
        let pass = err < tol.kronecker.unwrap();
        outcome.lines.push(format!("kronecker: {}", if pass { "pass" } else { "fail" }));
        outcome.criteria.push(Criterion::within("kronecker_config", err, 0.0, tol.kronecker.unwrap()));
        reports.push(checks::kronecker(&frame, 20, &[3, 10, 50, 100], tol.kronecker.unwrap(), seed)?);
    }
    if checks.contains(&Check::Schur) {
        reports.push(checks::schur(100, tol.identity.unwrap(), seed)?);
    }
    if checks.contains(&Check::Ktilde) {
        reports.push(checks::ktilde(
            c.probes.unwrap(),
            tol.identity.unwrap(),
            tol.determinant.unwrap(),
            tol.derivative.unwrap(),
            seed,
        )?);
    }
    if checks.contains(&Check::Moments) {
        reports.push(checks::moments(c.draws.unwrap(), 5, seed)?);
    }
    for rep in &reports {
        outcome.lines.push(format!("{}: {} ({} cases)", rep.name, if rep.pass { "pass" } else { "fail" }, rep.cases));
        outcome.push_criteria(&rep.criteria);
    }

    let mut g_json = None;
    if let Some(grid) = &c.l_grid {
        let g = g_limit(&y0, &theta0, &r.spec, &frame, grid, tol.g_rel.unwrap())?;
        write_g_limit_csv(&g, &out.join("g_limit.csv"))?;
        write_json(&out.join("g_limit.json"), &g)?;
        outcome.criteria.push(Criterion::at_least("g_residuals_monotone", f64::from(u8::from(g.monotone)), 1.0));
        let g_rel = tol.g_rel.unwrap();
        let limit = g.matrix();
        let (target, name) = match r.spec.closed_form() {
            Some(ClosedForm::PartialG(f)) => (f(&y0, &theta0), "g_closed_form"),
            _ => (limit.clone(), "g_kinds_agree"),
        };
        let scale = max_abs(&target).max(1.0);
        let last = *grid.last().unwrap();
        let worst = g
            .table
            .iter()
            .filter(|row| row.big_l == last)
            .map(|row| max_abs(&(DMatrix::from_row_slice(g.d, g.d, &row.value) - &target)))
            .fold(0.0, f64::max);
        outcome.criteria.push(Criterion::within(name, worst / scale, 0.0, g_rel));
        outcome.lines.push(format!("g limit: {:?} (spread {:.3e})", g.g, g.spread));
        g_json = Some(g);
    }
    let criteria_lines: Vec<String> = outcome.criteria.iter().map(criterion_line).collect();
    outcome.lines.extend(criteria_lines);
    write_json(
        &out.join("psi_report.json"),
        &json!({
            "k": psi.k,
            "l": psi.l,
            "L": big_l,
            "A": rows(&a),
            "checks": reports,
            "g_limit": g_json.map(|g| g.g),
            "criteria": outcome.criteria,
            "pass": outcome.pass(),
        }),
    )?;
    Ok(outcome)
}

fn relative_gap(a: &InfoMatrix, b: &InfoMatrix) -> f64 {
    max_abs(&(&a.matrix - &b.matrix)) / max_abs(&b.matrix).max(1.0)
}

fn info(r: &Resolved, out: &Path) -> Result<Outcome> {
    let theta0 = r.theta0();
    let path = simulate_path(&r.spec, &theta0, r.n(), r.substeps(), r.seed())?;
    let mut outcome = Outcome::default();
    let mut doc = serde_json::Map::new();
    let closed = match r.spec.closed_form() {
        Some(_) => Some(gamma_closed_form(&r.spec, &path, &theta0)?),
        None => None,
    };
    let main = match &r.scheme {
        SchemeSpec::Complete => {
            let terms = gamma_complete_terms(&path, &r.spec, &theta0)?;
            doc.insert(
                "terms".into(),
                json!({ "diffusive": rows(&terms.diffusive), "integrated": rows(&terms.integrated) }),
            );
            let gamma = gamma_complete(&path, &r.spec, &theta0)?;
            if let Some(cf) = &closed {
                outcome.criteria.push(Criterion::within("closed_form_agrees", relative_gap(&gamma, cf), 0.0, 1e-8));
            }
            gamma
        }
        SchemeSpec::Partial(p) => {
            let frame = ProjectionFrame::new(p);
            let psi_limit = gamma_partial(&path, &r.spec, &frame, &theta0, &GSource::PsiLimit { l_pair: (50, 100) })?;
            if let Some(cf) = &closed {
                let rel = r.tolerances().psi_limit_rel.unwrap();
                outcome.criteria.push(Criterion::within("psi_limit_agrees", relative_gap(&psi_limit, cf), 0.0, rel));
            }
            doc.insert("gamma_psi_limit".into(), psi_limit.to_json_value());
            match &closed {
                Some(_) => gamma_partial(&path, &r.spec, &frame, &theta0, &GSource::ClosedForm)?,
                None => psi_limit,
            }
        }
    };
    let (pd, min_eig) = check_pd(&main);
    outcome.criteria.push(Criterion::at_least("positive_definite", f64::from(u8::from(pd)), 1.0));
    outcome.lines.push(format!("gamma: {:?} (min eigenvalue {min_eig:.6e})", rows(&main.matrix)));
    if let Some(cf) = &closed {
        outcome.lines.push(format!("closed form: {:?}", rows(&cf.matrix)));
        doc.insert("gamma_closed_form".into(), cf.to_json_value());
    }
    doc.insert("gamma".into(), main.to_json_value());
    doc.insert("criteria".into(), serde_json::to_value(&outcome.criteria)?);
    doc.insert("pass".into(), json!(outcome.pass()));
    write_json(&out.join("info.json"), &doc)?;
    let lines: Vec<String> = outcome.criteria.iter().map(criterion_line).collect();
    outcome.lines.extend(lines);
    Ok(outcome)
}

fn lamn_check(r: &Resolved, out: &Path) -> Result<Outcome> {
    let h = DVector::from_column_slice(r.config.h.as_deref().unwrap());
    let settings = r.mc_settings();
    let report =
        run_lamn_mc(&r.spec, &r.scheme, &r.theta0(), &h, &settings, r.tolerances().variance_rel.unwrap())?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    write_records_csv(&report.records, create(&out.join("paths.csv"))?)?;
    let mut outcome = Outcome::default();
    outcome.lines.push(format!("{} paths, {} failures", report.paths, report.failures));
    outcome.push_criteria(&report.criteria);
    outcome.lines.extend(report.criteria.iter().map(criterion_line));
    Ok(outcome)
}

fn factor_two(r: &Resolved, out: &Path) -> Result<Outcome> {
    let settings = r.mc_settings();
    let report = factor_two_experiment(r.theta0()[0], &settings, r.tolerances().ratio_rel.unwrap())?;
    write_json(&out.join("report.json"), &report)?;
    let mut outcome = Outcome::default();
    outcome.push_criteria(&report.criteria);
    outcome.lines.extend(report.criteria.iter().map(criterion_line));
    Ok(outcome)
}

fn load_observations(path: &Path) -> Result<ObservationSet> {
    let sidecar_path = path.with_extension("json");
    let sidecar: ObservationSidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)
        .map_err(|e| LamnError::Parse(format!("{}: {e}", sidecar_path.display())))?;
    read_observations_csv(File::open(path)?, &sidecar)
}

#[derive(Serialize)]
struct EstimateDocument<'a> {
    model: &'a str,
    source: String,
    n: usize,
    theta_init: &'a [f64],
    #[serde(flatten)]
    report: &'a EstimateReport,
}

fn estimate(r: &Resolved, out: &Path) -> Result<Outcome> {
    let c = &r.config;
    let (obs, source) = match &c.observations {
        Some(p) => (load_observations(p)?, p.display().to_string()),
        None => (simulated(r)?.1, format!("simulated with seed {}", r.seed())),
    };
    if obs.scheme != r.scheme {
        return Err(LamnError::InvalidScheme("observations were taken under a different scheme".into()));
    }
    let anchor = c.anchor.unwrap_or_default();
    let data = QuasiData::new(&obs, &r.spec, r.block_len(), anchor)?;
    let init = c.theta_init.as_deref().unwrap();
    let report = estimate_prepared(&data, &r.spec, &DVector::from_column_slice(init), c.estimator.as_ref().unwrap())?;
    write_json(
        &out.join("estimate.json"),
        &EstimateDocument { model: &r.spec.name, source, n: obs.n, theta_init: init, report: &report },
    )?;
    let mut outcome = Outcome::default();
    outcome.lines.push(format!(
        "theta_hat = {:?} after {} iterations ({})",
        report.theta,
        report.iterations,
        if report.converged { "converged" } else { "not converged" }
    ));
    outcome.criteria.push(Criterion::at_least("converged", f64::from(u8::from(report.converged)), 1.0));
    if c.gradient_check == Some(true) {
        let g = checks::gradient(20, r.tolerances().gradient.unwrap(), r.seed())?;
        write_json(&out.join("gradient.json"), &g)?;
        outcome.push_criteria(&g.criteria);
    }
    let lines: Vec<String> = outcome.criteria.iter().map(criterion_line).collect();
    outcome.lines.extend(lines);
    Ok(outcome)
}

fn study(r: &Resolved, out: &Path) -> Result<Outcome> {
    let settings = r.mc_settings();
    let report = estimator_study(
        &r.spec,
        &r.scheme,
        &r.theta0(),
        &settings,
        r.config.estimator.as_ref().unwrap(),
        r.tolerances().study_rel.unwrap(),
    )?;
    write_json(&out.join("study.json"), &report)?;
    write_study_csv(&report.records, create(&out.join("study.csv"))?)?;
    let mut outcome = Outcome::default();
    outcome.lines.push(format!(
        "{} replications, {} failures, {} unconverged",
        report.paths, report.failures, report.unconverged
    ));
    outcome.push_criteria(&report.criteria);
    outcome.lines.extend(report.criteria.iter().map(criterion_line));
    Ok(outcome)
}

/// Writes `text` to `path` and flushes.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}
