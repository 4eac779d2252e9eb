//! CSV persistence for paths and observation sets, with JSON sidecars.
//!
//! Numbers are written with 17 significant digits so a round trip is exact.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ObservationSet, PathSample};
use crate::error::{LamnError, Result};
use crate::model::{SchemeDocument, SchemeSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSidecar {
    pub model: String,
    pub seed: u64,
    pub n: usize,
    pub substeps: usize,
    pub theta: Vec<f64>,
}

impl PathSidecar {
    pub fn of(path: &PathSample) -> Self {
        Self {
            model: path.model.clone(),
            seed: path.seed,
            n: path.n,
            substeps: path.substeps,
            theta: path.theta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSidecar {
    pub model: String,
    pub seed: u64,
    pub n: usize,
    pub substeps: usize,
    pub theta: Vec<f64>,
    pub scheme: SchemeDocument,
}

/// Largest row count accepted from a sidecar.
const MAX_ROWS: usize = 1 << 32;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, row: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| LamnError::Parse(format!("row {row}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(LamnError::Parse(format!("row {row}: non-finite value")));
    }
    Ok(v)
}

fn check_time(t: f64, k: usize, steps: usize, row: usize) -> Result<()> {
    let expected = k as f64 / steps as f64;
    if (t - expected).abs() > 1e-9 {
        return Err(LamnError::Parse(format!("row {row}: time {t} does not match grid value {expected}")));
    }
    Ok(())
}

/// Writes `t, x1..xm`, one row per fine-grid time.
pub fn write_path_csv<W: Write>(path: &PathSample, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let m = path.states.ncols();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for k in 0..path.states.nrows() {
        let mut rec = vec![fmt(path.fine_time(k))];
        rec.extend(path.states.row(k).iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a path written by [`write_path_csv`].
pub fn read_path_csv<R: Read>(input: R, sidecar: &PathSidecar) -> Result<PathSample> {
    if sidecar.n < 2 || sidecar.substeps == 0 {
        return Err(LamnError::Parse("sidecar needs n >= 2 and substeps >= 1".into()));
    }
    let steps = sidecar
        .n
        .checked_mul(sidecar.substeps)
        .filter(|&s| s < MAX_ROWS)
        .ok_or_else(|| LamnError::Parse("n * substeps is too large".into()))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    let m = header.len().saturating_sub(1);
    if m == 0 || &header[0] != "t" || (1..=m).any(|i| header[i] != format!("x{i}")) {
        return Err(LamnError::Parse("path header must be t, x1, ..., xm".into()));
    }
    let mut data = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if k > steps {
            return Err(LamnError::Parse(format!("more than {} rows", steps + 1)));
        }
        if rec.len() != m + 1 {
            return Err(LamnError::Parse(format!("row {k}: expected {} fields", m + 1)));
        }
        check_time(parse_f64(&rec[0], k)?, k, steps, k)?;
        for i in 1..=m {
            data.push(parse_f64(&rec[i], k)?);
        }
    }
    if data.len() != (steps + 1) * m {
        return Err(LamnError::Parse(format!("expected {} rows", steps + 1)));
    }
    Ok(PathSample {
        model: sidecar.model.clone(),
        theta: sidecar.theta.clone(),
        seed: sidecar.seed,
        n: sidecar.n,
        substeps: sidecar.substeps,
        states: DMatrix::from_row_slice(steps + 1, m, &data),
    })
}

fn observation_header(obs_cols: usize, scheme: &SchemeSpec, aug: usize) -> Vec<String> {
    let mut h = vec!["k".to_string(), "t".to_string()];
    match scheme {
        SchemeSpec::Complete => h.extend((1..=obs_cols).map(|i| format!("x{i}"))),
        SchemeSpec::Partial(p) => {
            let q1 = p.q1;
            h.extend((1..=q1).map(|i| format!("qy{i}")));
            h.extend((1..=obs_cols - q1).map(|i| format!("ycheck{i}")));
            h.extend((1..=aug).map(|i| format!("hidden{i}")));
        }
    }
    h
}

/// Writes `k, t` and the observed columns; partial sets append the hidden
/// coordinates when present.
pub fn write_observations_csv<W: Write>(obs: &ObservationSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let aug = obs.augmented.as_ref().map_or(0, |a| a.ncols());
    w.write_record(observation_header(obs.width(), &obs.scheme, aug))?;
    for k in 0..=obs.n {
        let mut rec = vec![k.to_string(), fmt(k as f64 / obs.n as f64)];
        rec.extend(obs.rows.row(k).iter().map(|&v| fmt(v)));
        if let Some(a) = &obs.augmented {
            rec.extend(a.row(k).iter().map(|&v| fmt(v)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an observation set; the scheme and `n` come from the sidecar.
pub fn read_observations_csv<R: Read>(input: R, sidecar: &ObservationSidecar) -> Result<ObservationSet> {
    let scheme = sidecar.scheme.to_scheme()?;
    let n = sidecar.n;
    if !(2..MAX_ROWS).contains(&n) {
        return Err(LamnError::Parse("sidecar n is out of range".into()));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let (obs_cols, aug) = match &scheme {
        SchemeSpec::Complete => (header.len().saturating_sub(2), 0),
        SchemeSpec::Partial(p) => {
            let base = p.q1 + p.q2;
            let aug = header.len().saturating_sub(2 + base);
            if aug != 0 && aug != p.kappa() - p.q1 {
                return Err(LamnError::Parse(format!("expected 0 or {} hidden columns", p.kappa() - p.q1)));
            }
            (base, aug)
        }
    };
    if obs_cols == 0 || header != observation_header(obs_cols, &scheme, aug) {
        return Err(LamnError::Parse("observation header does not match the scheme".into()));
    }
    let width = obs_cols + aug;
    let mut data = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if k > n {
            return Err(LamnError::Parse(format!("more than {} rows", n + 1)));
        }
        if rec.len() != width + 2 {
            return Err(LamnError::Parse(format!("row {k}: expected {} fields", width + 2)));
        }
        if rec[0].trim().parse::<usize>().ok() != Some(k) {
            return Err(LamnError::Parse(format!("row {k}: index column out of sequence")));
        }
        check_time(parse_f64(&rec[1], k)?, k, n, k)?;
        for i in 0..width {
            data.push(parse_f64(&rec[2 + i], k)?);
        }
    }
    if data.len() != (n + 1) * width {
        return Err(LamnError::Parse(format!("expected {} rows", n + 1)));
    }
    let all = DMatrix::from_row_slice(n + 1, width, &data);
    let rows = all.columns(0, obs_cols).into_owned();
    let augmented = (aug > 0).then(|| all.columns(obs_cols, aug).into_owned());
    Ok(ObservationSet { n, scheme, rows, augmented })
}
