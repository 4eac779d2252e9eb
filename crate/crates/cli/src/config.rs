//! Experiment configuration: a JSON document plus command-line overrides.

use std::path::PathBuf;

use lamn_core::lamn_mc::{McSettings, MIN_PATHS};
use lamn_core::model::{builtin_default_theta, BuiltinParams, ModelDocument, ModelSpec, SchemeDocument, SchemeSpec};
use lamn_core::qmle::EstimateOptions;
use lamn_core::simulate::{default_block_len, Anchor, DEFAULT_SUBSTEPS};
use lamn_core::{LamnError, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Psi,
    Info,
    LamnCheck,
    FactorTwo,
    Estimate,
    Study,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Psi => "psi",
            Command::Info => "info",
            Command::LamnCheck => "lamn-check",
            Command::FactorTwo => "factor-two",
            Command::Estimate => "estimate",
            Command::Study => "study",
        }
    }

    fn monte_carlo(self) -> bool {
        matches!(self, Command::LamnCheck | Command::FactorTwo | Command::Study)
    }
}

/// Identity checks run by the `psi` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Kronecker,
    Schur,
    Ktilde,
    Moments,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_rel: Option<f64>,
    /// Relative distance of the extrapolated `g` from the closed form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_rel: Option<f64>,
    /// Relative agreement of the ψ-limit information with the closed form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_limit_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kronecker: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivative: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub determinant: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<f64>,
}

macro_rules! optional_fields {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        pub struct $name {
            $(
                $(#[$fmeta])*
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }
    };
}

optional_fields! {
    #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ExperimentConfig {
        lamn_version: String,
        command: Command,
        model: String,
        params: BuiltinParams,
        scheme: SchemeDocument,
        n: usize,
        #[serde(rename = "M", alias = "paths")]
        paths: usize,
        substeps: usize,
        e_n: usize,
        seed: u64,
        h: Vec<f64>,
        theta0: Vec<f64>,
        theta_init: Vec<f64>,
        #[serde(rename = "L")]
        big_l: usize,
        #[serde(rename = "L_grid")]
        l_grid: Vec<usize>,
        k: u8,
        l: u8,
        anchor: Anchor,
        tolerances: Tolerances,
        estimator: EstimateOptions,
        observations: PathBuf,
        checks: Vec<Check>,
        gradient_check: bool,
        draws: usize,
        probes: usize,
        #[serde(skip_serializing)]
        output: PathBuf,
    }
}

/// Values given on the command line; each one replaces the config's.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub model: Option<String>,
    pub n: Option<usize>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub substeps: Option<usize>,
    pub e_n: Option<usize>,
    pub h: Option<Vec<f64>>,
    pub theta0: Option<Vec<f64>>,
    pub big_l: Option<usize>,
    pub output: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> LamnError {
    LamnError::InvalidArgument(msg.into())
}

fn finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{name} has a non-finite entry")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LamnError::Parse(format!("experiment config: {e}")))
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configs always serialize");
        s.push('\n');
        s
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = &o.$f { self.$f = Some(v.clone()); })* };
        }
        take!(model, n, paths, seed, substeps, e_n, h, theta0, big_l, output);
    }

    /// Checks every field against the module preconditions and fills the
    /// defaults the command uses. The result is the manifest.
    pub fn resolve(mut self, command: Command) -> Result<Resolved> {
        if let Some(c) = self.command {
            if c != command {
                return Err(invalid(format!("config is for `{}`, not `{}`", c.name(), command.name())));
            }
        }
        self.command = Some(command);
        self.lamn_version = Some(env!("CARGO_PKG_VERSION").to_string());
        if command == Command::FactorTwo {
            match self.model.as_deref() {
                None | Some("langevin") => self.model = Some("langevin".into()),
                Some(other) => return Err(invalid(format!("factor-two runs the langevin pair, not `{other}`"))),
            }
        }
        let name = self.model.clone().ok_or_else(|| invalid("no model given"))?;
        let doc = ModelDocument {
            name: name.clone(),
            dims: None,
            params: self.params.clone().unwrap_or_default(),
            scheme: self.scheme.clone(),
        };
        let (spec, scheme) = doc.build()?;
        self.params = Some(doc.params.clone());
        self.scheme = Some(SchemeDocument::from_scheme(&scheme));
        let d = spec.dims.d;

        let theta0 = match self.theta0.take() {
            Some(t) => t,
            None => builtin_default_theta(&name, &doc.params)?,
        };
        check_theta(&spec, "theta0", &theta0)?;
        self.theta0 = Some(theta0);

        let partial = scheme.is_partial();
        let tol = self.tolerances.get_or_insert_with(Tolerances::default);
        let default_n = match command {
            Command::Psi => None,
            Command::Info => Some(200),
            _ if partial => Some(1000),
            _ => Some(400),
        };
        if let Some(n) = default_n {
            let n = *self.n.get_or_insert(n);
            if n < 2 {
                return Err(invalid(format!("n must be at least 2, got {n}")));
            }
            let substeps = *self.substeps.get_or_insert(DEFAULT_SUBSTEPS);
            if substeps == 0 {
                return Err(invalid("substeps must be positive"));
            }
            self.seed.get_or_insert(0);
            if partial && command != Command::Simulate && command != Command::Info {
                let e_n = *self.e_n.get_or_insert_with(|| default_block_len(n));
                if e_n < 3 {
                    return Err(invalid(format!("e_n must be at least 3, got {e_n}")));
                }
                if (n - 1) / e_n == 0 {
                    return Err(invalid(format!("e_n = {e_n} leaves no block for n = {n}")));
                }
            }
            if partial {
                self.anchor.get_or_insert_with(Anchor::default);
            }
        }
        if command.monte_carlo() {
            let m = *self.paths.get_or_insert(1000);
            if m < MIN_PATHS {
                return Err(invalid(format!("M must be at least {MIN_PATHS}, got {m}")));
            }
        }
        match command {
            Command::Psi => {
                if !partial {
                    return Err(LamnError::InvalidScheme("psi needs a partial observation scheme".into()));
                }
                let big_l = *self.big_l.get_or_insert(10);
                if big_l < 3 {
                    return Err(invalid(format!("L must be at least 3, got {big_l}")));
                }
                for (name, v) in [("k", self.k.get_or_insert(2)), ("l", self.l.get_or_insert(2))] {
                    if !(1..=2).contains(v) {
                        return Err(invalid(format!("{name} must be 1 or 2, got {v}")));
                    }
                }
                if let Some(grid) = &self.l_grid {
                    if grid.len() < 2 || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 3 {
                        return Err(invalid("L_grid must be strictly increasing, start at 3 or more and have two points"));
                    }
                    if *grid.last().unwrap() < 100 {
                        return Err(invalid("L_grid must reach at least 100"));
                    }
                    tol.g_rel.get_or_insert(0.01);
                }
                let integrated = scheme.partial().is_some_and(|p| p.q1 == 0 && p.q2 == p.kappa());
                let checks = self.checks.get_or_insert_with(|| if integrated { vec![Check::Kronecker] } else { vec![] });
                if checks.contains(&Check::Kronecker) && !integrated {
                    return Err(LamnError::InvalidScheme("the kronecker check needs Q = 0 and rank(B) = kappa".into()));
                }
                checks.dedup();
                tol.kronecker.get_or_insert(1e-12);
                if checks.iter().any(|c| matches!(c, Check::Schur | Check::Ktilde)) {
                    tol.identity.get_or_insert(1e-10);
                }
                if checks.contains(&Check::Ktilde) {
                    tol.derivative.get_or_insert(1e-9);
                    tol.determinant.get_or_insert(1e-9);
                    self.probes.get_or_insert(50);
                }
                if checks.contains(&Check::Moments) {
                    self.draws.get_or_insert(100_000);
                }
                self.seed.get_or_insert(0);
            }
            Command::Info => {
                if partial {
                    tol.psi_limit_rel.get_or_insert(0.02);
                }
            }
            Command::LamnCheck => {
                let h = self.h.get_or_insert_with(|| vec![1.0; d]);
                if h.len() != d {
                    return Err(LamnError::Dimension(format!("h has length {}, model has d = {d}", h.len())));
                }
                finite("h", h)?;
                tol.variance_rel.get_or_insert(if partial { 0.07 } else { 0.05 });
            }
            Command::FactorTwo => {
                if d != 1 {
                    return Err(LamnError::Dimension("factor-two needs a scalar parameter".into()));
                }
                tol.ratio_rel.get_or_insert(0.1);
                let n = self.n.unwrap();
                self.e_n.get_or_insert_with(|| default_block_len(n));
            }
            Command::Estimate => {
                let init = self.theta_init.get_or_insert_with(|| spec.theta_box.center().iter().copied().collect());
                check_theta(&spec, "theta_init", init)?;
                self.estimator.get_or_insert_with(EstimateOptions::default);
                if *self.gradient_check.get_or_insert(false) {
                    tol.gradient.get_or_insert(1e-6);
                }
            }
            Command::Study => {
                self.estimator.get_or_insert_with(EstimateOptions::default);
                tol.study_rel.get_or_insert(if partial { 0.15 } else { 0.10 });
            }
            Command::Simulate => {}
        }
        if let Some(opts) = &self.estimator {
            if !(opts.tol > 0.0) || opts.max_iter == 0 {
                return Err(invalid("estimator tol and max_iter must be positive"));
            }
        }
        if let Some(draws) = self.draws {
            if draws < 2 {
                return Err(invalid("draws must be at least 2"));
            }
        }
        if let Some(t) = &self.tolerances {
            let all = [
                t.variance_rel, t.study_rel, t.ratio_rel, t.g_rel, t.psi_limit_rel, t.kronecker, t.identity,
                t.derivative, t.determinant, t.gradient,
            ];
            if all.iter().flatten().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(invalid("tolerances must be positive and finite"));
            }
        }
        Ok(Resolved { command, config: self, spec, scheme })
    }
}

fn check_theta(spec: &ModelSpec, name: &str, theta: &[f64]) -> Result<()> {
    if theta.len() != spec.dims.d {
        return Err(LamnError::Dimension(format!("{name} has length {}, model has d = {}", theta.len(), spec.dims.d)));
    }
    finite(name, theta)?;
    spec.check_theta(&DVector::from_column_slice(theta))
}

/// A validated configuration with its model built.
pub struct Resolved {
    pub command: Command,
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub scheme: SchemeSpec,
}

impl Resolved {
    pub fn theta0(&self) -> DVector<f64> {
        DVector::from_column_slice(self.config.theta0.as_deref().unwrap())
    }

    pub fn n(&self) -> usize {
        self.config.n.unwrap()
    }

    pub fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(0)
    }

    pub fn substeps(&self) -> usize {
        self.config.substeps.unwrap_or(DEFAULT_SUBSTEPS)
    }

    pub fn tolerances(&self) -> &Tolerances {
        self.config.tolerances.as_ref().unwrap()
    }

    pub fn mc_settings(&self) -> McSettings {
        McSettings {
            n: self.n(),
            paths: self.config.paths.unwrap_or(MIN_PATHS),
            seed: self.seed(),
            substeps: self.substeps(),
            e_n: self.config.e_n,
            anchor: self.config.anchor.unwrap_or_default(),
        }
    }

    pub fn block_len(&self) -> usize {
        self.config.e_n.unwrap_or_else(|| default_block_len(self.n()))
    }
}
