use std::f64::consts::SQRT_2;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ClosedForm, Dims, ModelBuilder, ModelSpec, PartialScheme, SchemeSpec, ThetaBox};
use crate::error::{LamnError, Result};
use crate::linalg;

pub const BUILTIN_NAMES: [&str; 8] = [
    "langevin",
    "langevin-partial-velocity",
    "shared-noise",
    "factor",
    "scaled-factor",
    "integrated",
    "stochvol-common",
    "stochvol-diagonal",
];

/// Scalar volatility multiplier `f(x, θ) > 0`; the diffusion is `f · A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleLaw {
    /// `θ`
    Scale,
    /// `exp(θ)`
    Exp,
    /// `θ sqrt(1 + |x|²)`
    SqrtState,
    /// `θ (1 + 0.1 sin x₁)`
    SineState,
    /// `sqrt(θ² + |x|²)`
    RootSum,
    /// `θ₁ exp(θ₂ sin x₁)`
    TwoScale,
    /// `exp(θ₁ + θ₂)`, not identifiable in the direction `(1, -1)`.
    RedundantExp,
}

impl ScaleLaw {
    pub fn dim(self) -> usize {
        match self {
            ScaleLaw::TwoScale | ScaleLaw::RedundantExp => 2,
            _ => 1,
        }
    }

    /// Whether `θ_i` must stay positive for `f > 0`.
    fn needs_positive(self, i: usize) -> bool {
        match self {
            ScaleLaw::Scale | ScaleLaw::SqrtState | ScaleLaw::SineState | ScaleLaw::RootSum => true,
            ScaleLaw::TwoScale => i == 0,
            ScaleLaw::Exp | ScaleLaw::RedundantExp => false,
        }
    }

    pub fn default_box(self) -> ThetaBox {
        let (lower, upper): (Vec<f64>, Vec<f64>) = (0..self.dim())
            .map(|i| if self.needs_positive(i) { (0.1, 10.0) } else { (-5.0, 5.0) })
            .unzip();
        ThetaBox { lower, upper }
    }

    pub fn default_theta(self) -> Vec<f64> {
        match self {
            ScaleLaw::Exp => vec![0.0],
            ScaleLaw::TwoScale => vec![1.0, 0.5],
            ScaleLaw::RedundantExp => vec![0.0, 0.0],
            _ => vec![1.0],
        }
    }

    pub fn value(self, x: &[f64], theta: &[f64]) -> f64 {
        let s1 = x.first().map_or(0.0, |v| v.sin());
        let sq: f64 = x.iter().map(|v| v * v).sum();
        match self {
            ScaleLaw::Scale => theta[0],
            ScaleLaw::Exp => theta[0].exp(),
            ScaleLaw::SqrtState => theta[0] * (1.0 + sq).sqrt(),
            ScaleLaw::SineState => theta[0] * (1.0 + 0.1 * s1),
            ScaleLaw::RootSum => (theta[0] * theta[0] + sq).sqrt(),
            ScaleLaw::TwoScale => theta[0] * (theta[1] * s1).exp(),
            ScaleLaw::RedundantExp => (theta[0] + theta[1]).exp(),
        }
    }

    pub fn gradient(self, x: &[f64], theta: &[f64]) -> DVector<f64> {
        let s1 = x.first().map_or(0.0, |v| v.sin());
        let sq: f64 = x.iter().map(|v| v * v).sum();
        match self {
            ScaleLaw::Scale => DVector::from_element(1, 1.0),
            ScaleLaw::Exp => DVector::from_element(1, theta[0].exp()),
            ScaleLaw::SqrtState => DVector::from_element(1, (1.0 + sq).sqrt()),
            ScaleLaw::SineState => DVector::from_element(1, 1.0 + 0.1 * s1),
            ScaleLaw::RootSum => DVector::from_element(1, theta[0] / (theta[0] * theta[0] + sq).sqrt()),
            ScaleLaw::TwoScale => {
                let e = (theta[1] * s1).exp();
                DVector::from_vec(vec![e, theta[0] * s1 * e])
            }
            ScaleLaw::RedundantExp => {
                let e = (theta[0] + theta[1]).exp();
                DVector::from_vec(vec![e, e])
            }
        }
    }
}

/// Constants for a builtin model. Missing fields take the model's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_prime: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<ScaleLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    /// Row-major `kappa × kappa` loading matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loadings: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_ini: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_box: Option<Vec<[f64; 2]>>,
}

/// Largest state dimension a builtin accepts.
pub const MAX_DIM: usize = 64;

type ArgFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// The scale law a builtin uses when `params.diffusion` is absent.
pub fn builtin_default_law(name: &str) -> Result<ScaleLaw> {
    Ok(match name {
        "langevin" | "integrated" | "shared-noise" | "stochvol-diagonal" => ScaleLaw::Scale,
        "langevin-partial-velocity" | "factor" | "stochvol-common" => ScaleLaw::Exp,
        "scaled-factor" => ScaleLaw::SineState,
        other => return Err(LamnError::UnknownModel(other.to_string())),
    })
}

/// The reference parameter of a builtin: `1` for scale laws, `0` for
/// exponential ones.
pub fn builtin_default_theta(name: &str, params: &BuiltinParams) -> Result<Vec<f64>> {
    Ok(params.diffusion.map_or_else(|| builtin_default_law(name), Ok)?.default_theta())
}

/// Builds one of the builtin models together with its observation scheme.
pub fn builtin_model(name: &str, params: &BuiltinParams) -> Result<(ModelSpec, SchemeSpec)> {
    for (key, v) in [("kappa", params.kappa), ("kappa_prime", params.kappa_prime), ("m", params.m)] {
        if v.is_some_and(|v| v > MAX_DIM) {
            return Err(LamnError::InvalidModel(format!("{key} exceeds the supported maximum {MAX_DIM}")));
        }
    }
    let (spec, scheme) = match name {
        "langevin" => langevin(params, false)?,
        "integrated" => langevin(params, true)?,
        "langevin-partial-velocity" => partial_velocity(params)?,
        "shared-noise" => shared_noise(params)?,
        "factor" => factor(params, "factor", ScaleLaw::Exp)?,
        "scaled-factor" => factor(params, "scaled-factor", ScaleLaw::SineState)?,
        "stochvol-common" => stochvol_common(params)?,
        "stochvol-diagonal" => stochvol_diagonal(params)?,
        other => return Err(LamnError::UnknownModel(other.to_string())),
    };
    scheme.check_model(&spec)?;
    Ok((spec, scheme))
}

fn theta_box(params: &BuiltinParams, law: ScaleLaw) -> Result<ThetaBox> {
    let b = match &params.theta_box {
        Some(v) => ThetaBox::new(v.iter().map(|p| p[0]).collect(), v.iter().map(|p| p[1]).collect())?,
        None => law.default_box(),
    };
    if b.dim() != law.dim() {
        return Err(LamnError::InvalidModel(format!(
            "theta_box has {} entries, the {law:?} law needs {}",
            b.dim(),
            law.dim()
        )));
    }
    for i in 0..b.dim() {
        if law.needs_positive(i) && b.lower[i] <= 0.0 {
            return Err(LamnError::InvalidModel(format!(
                "the {law:?} law needs theta_{} > 0 for a positive scale, box lower bound is {}",
                i + 1,
                b.lower[i]
            )));
        }
    }
    Ok(b)
}

fn loadings(params: &BuiltinParams, kappa: usize, default: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = match &params.loadings {
        Some(v) if v.len() == kappa * kappa => DMatrix::from_row_slice(kappa, kappa, v),
        Some(v) => {
            return Err(LamnError::InvalidModel(format!(
                "loadings has {} entries, expected {}",
                v.len(),
                kappa * kappa
            )))
        }
        None => default,
    };
    if a.iter().any(|x| !x.is_finite()) || !(linalg::min_singular_value(&a) >= 1e-10) {
        return Err(LamnError::InvalidModel("loadings must be finite and invertible".into()));
    }
    Ok(a)
}

fn damping(params: &BuiltinParams, default: f64) -> Result<f64> {
    let l = params.damping.unwrap_or(default);
    if !l.is_finite() {
        return Err(LamnError::InvalidModel("damping must be finite".into()));
    }
    Ok(l)
}

fn z_ini(params: &BuiltinParams, m: usize) -> DVector<f64> {
    params.z_ini.as_ref().map_or_else(|| DVector::zeros(m), |v| DVector::from_column_slice(v))
}

fn upper_loadings(kappa: usize) -> DMatrix<f64> {
    DMatrix::from_fn(kappa, kappa, |i, j| {
        if i == j {
            1.0 - 0.2 * (i % 2) as f64
        } else if j == i + 1 {
            0.3
        } else {
            0.0
        }
    })
}

/// Sets `ã = f(arg(y), θ) A` and its analytic `θ`-derivative.
fn scaled(builder: ModelBuilder, law: ScaleLaw, a: DMatrix<f64>, arg: ArgFn) -> ModelBuilder {
    let (a1, arg1) = (a.clone(), arg.clone());
    builder
        .a_tilde(move |y, th| &a1 * law.value(arg1(y).as_slice(), th.as_slice()))
        .d_theta_a(move |y, th, i| &a * law.gradient(arg(y).as_slice(), th.as_slice())[i])
}

/// `factor · ∇f ∇fᵀ / f²`.
fn log_gradient_outer(law: ScaleLaw, arg: ArgFn, factor: f64) -> super::MatFn {
    Arc::new(move |y, th| {
        let x = arg(y);
        let g = law.gradient(x.as_slice(), th.as_slice()) / law.value(x.as_slice(), th.as_slice());
        &g * g.transpose() * factor
    })
}

fn head(k: usize) -> ArgFn {
    Arc::new(move |y| y.rows(0, k).into_owned())
}

fn langevin(params: &BuiltinParams, integrated: bool) -> Result<(ModelSpec, SchemeSpec)> {
    let kappa = params.kappa.unwrap_or(1);
    if kappa == 0 {
        return Err(LamnError::InvalidModel("kappa must be positive".into()));
    }
    let law = params.diffusion.unwrap_or(ScaleLaw::Scale);
    let a = loadings(params, kappa, DMatrix::identity(kappa, kappa))?;
    let lam = damping(params, 0.0)?;
    let dims = Dims { m: 2 * kappa, kappa, r: kappa, d: law.dim() };
    let name = if integrated { "integrated" } else { "langevin" };
    let integrand = log_gradient_outer(law, head(kappa), 4.0 * kappa as f64);
    let closed = if integrated { ClosedForm::PartialG(integrand) } else { ClosedForm::Complete(integrand) };
    let spec = scaled(ModelSpec::builder(name, dims), law, a, head(kappa))
        .theta_box(theta_box(params, law)?)
        .z_ini(z_ini(params, 2 * kappa))
        .b_tilde(move |y, _| -lam * y.rows(0, kappa))
        .b_check(move |y| y.rows(0, kappa).into_owned())
        .grad1_b_check(move |_| DMatrix::identity(kappa, kappa))
        .closed_form(closed)
        .build()?;
    let scheme = if integrated {
        SchemeSpec::Partial(PartialScheme::new(DMatrix::zeros(kappa, kappa), DMatrix::identity(kappa, kappa))?)
    } else {
        SchemeSpec::Complete
    };
    Ok((spec, scheme))
}

fn partial_velocity(params: &BuiltinParams) -> Result<(ModelSpec, SchemeSpec)> {
    let kappa = params.kappa.unwrap_or(2);
    let kp = params.kappa_prime.unwrap_or(1);
    if kp == 0 || kp > kappa {
        return Err(LamnError::InvalidModel(format!("need 1 <= kappa_prime <= kappa, got {kp} and {kappa}")));
    }
    let law = params.diffusion.unwrap_or(ScaleLaw::Exp);
    let a = loadings(params, kappa, upper_loadings(kappa))?;
    let lam = damping(params, 0.0)?;
    let dims = Dims { m: kappa + kp, kappa, r: kappa, d: law.dim() };
    let spec = scaled(ModelSpec::builder("langevin-partial-velocity", dims), law, a, head(kappa))
        .theta_box(theta_box(params, law)?)
        .z_ini(z_ini(params, kappa + kp))
        .b_tilde(move |y, _| -lam * y.rows(0, kappa))
        .b_check(move |y| y.rows(0, kp).into_owned())
        .grad1_b_check(move |_| DMatrix::identity(kappa, kp))
        .closed_form(ClosedForm::Complete(log_gradient_outer(law, head(kappa), 2.0 * (kappa + kp) as f64)))
        .build()?;
    Ok((spec, SchemeSpec::Complete))
}

/// Two coordinates sharing one noise; `d = -λ (x + y)`, `e = x + y`,
/// and `c` a function of `x + y`.
fn shared_noise(params: &BuiltinParams) -> Result<(ModelSpec, SchemeSpec)> {
    let law = params.diffusion.unwrap_or(ScaleLaw::Scale);
    let lam = damping(params, 1.0)?;
    let dims = Dims { m: 2, kappa: 1, r: 1, d: law.dim() };
    let u = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]) / SQRT_2;
    // x + y = √2 ỹ
    let sum: ArgFn = Arc::new(|y| DVector::from_element(1, SQRT_2 * y[0]));
    let a = DMatrix::from_element(1, 1, SQRT_2);
    let spec = scaled(ModelSpec::builder("shared-noise", dims), law, a, sum.clone())
        .theta_box(theta_box(params, law)?)
        .z_ini(z_ini(params, 2))
        .rotation(u)
        .b_tilde(move |y, _| DVector::from_element(1, (1.0 - 2.0 * lam) * y[0]))
        .b_check(|y| DVector::from_element(1, y[0]))
        .grad1_b_check(|_| DMatrix::from_element(1, 1, 1.0))
        .closed_form(ClosedForm::Complete(log_gradient_outer(law, sum, 4.0)))
        .build()?;
    Ok((spec, SchemeSpec::Complete))
}

fn householder(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::identity(n, n) - v * v.transpose() * (2.0 / v.norm_squared())
}

/// `dX = e(X) dt + f(X, θ) A dW` with `A = Uᵀ (Λ; 0) V` of rank `kappa`.
fn factor(params: &BuiltinParams, name: &str, default_law: ScaleLaw) -> Result<(ModelSpec, SchemeSpec)> {
    let m = params.m.unwrap_or(3);
    let kappa = params.kappa.unwrap_or(2);
    if !(2 * kappa >= m && kappa < m) {
        return Err(LamnError::InvalidModel(format!("factor models need m/2 <= kappa < m, got m={m}, kappa={kappa}")));
    }
    if params.loadings.is_some() {
        return Err(LamnError::InvalidModel("factor models build their own loadings".into()));
    }
    let law = params.diffusion.unwrap_or(default_law);
    let lam = damping(params, 0.0)?;
    let u = householder(&DVector::from_fn(m, |i, _| (i + 1) as f64));
    let v = householder(&DVector::from_element(kappa, 1.0));
    let lambda = DMatrix::from_diagonal(&DVector::from_fn(kappa, |i, _| 1.0 / (1.0 + 0.5 * i as f64)));
    let q = m - kappa;
    // W is kappa × q with full column rank.
    let w = DMatrix::from_fn(kappa, q, |i, j| {
        if i == j {
            1.0
        } else if i == j + 1 {
            0.5
        } else {
            0.0
        }
    });
    let ut = u.transpose();
    let raw: ArgFn = Arc::new(move |y| &ut * y);
    let dims = Dims { m, kappa, r: kappa, d: law.dim() };
    let (w1, w2) = (w.clone(), w);
    let spec = scaled(ModelSpec::builder(name, dims), law, &lambda * v, raw.clone())
        .theta_box(theta_box(params, law)?)
        .z_ini(z_ini(params, m))
        .rotation(u)
        .b_tilde(move |y, _| -lam * y.rows(0, kappa))
        .b_check(move |y| w1.transpose() * y.rows(0, kappa))
        .grad1_b_check(move |_| w2.clone())
        .closed_form(ClosedForm::Complete(log_gradient_outer(law, raw, 2.0 * m as f64)))
        .build()?;
    Ok((spec, SchemeSpec::Complete))
}

fn stochvol_scheme() -> Result<SchemeSpec> {
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    Ok(SchemeSpec::Partial(PartialScheme::new(q, b)?))
}

/// Price `x₁`, volatility factor `x₂`, and its integral `x₃`; `c = f A`.
fn stochvol_common(params: &BuiltinParams) -> Result<(ModelSpec, SchemeSpec)> {
    let law = params.diffusion.unwrap_or(ScaleLaw::Exp);
    let a = loadings(params, 2, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 0.8]))?;
    let lam = damping(params, 0.0)?;
    let dims = Dims { m: 3, kappa: 2, r: 2, d: law.dim() };
    let spec = scaled(ModelSpec::builder("stochvol-common", dims), law, a, head(2))
        .theta_box(theta_box(params, law)?)
        .z_ini(z_ini(params, 3))
        .b_tilde(move |y, _| -lam * y.rows(0, 2))
        .b_check(|y| DVector::from_element(1, y[1]))
        .grad1_b_check(|_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]))
        .closed_form(ClosedForm::PartialG(log_gradient_outer(law, head(2), 8.0)))
        .build()?;
    Ok((spec, stochvol_scheme()?))
}

/// As [`stochvol_common`] with `c = diag(f(x, θ), σ₂)`.
fn stochvol_diagonal(params: &BuiltinParams) -> Result<(ModelSpec, SchemeSpec)> {
    let law = params.diffusion.unwrap_or(ScaleLaw::Scale);
    let sigma2 = params.sigma2.unwrap_or(1.0);
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(LamnError::InvalidModel("sigma2 must be positive".into()));
    }
    if params.loadings.is_some() {
        return Err(LamnError::InvalidModel("stochvol-diagonal takes sigma2, not loadings".into()));
    }
    let lam = damping(params, 0.0)?;
    let dims = Dims { m: 3, kappa: 2, r: 2, d: law.dim() };
    let spec = ModelSpec::builder("stochvol-diagonal", dims)
        .a_tilde(move |y, th| {
            let f = law.value(&[y[0], y[1]], th.as_slice());
            DMatrix::from_diagonal(&DVector::from_vec(vec![f, sigma2]))
        })
        .d_theta_a(move |y, th, i| {
            let g = law.gradient(&[y[0], y[1]], th.as_slice())[i];
            DMatrix::from_diagonal(&DVector::from_vec(vec![g, 0.0]))
        })
        .theta_box(theta_box(params, law)?)
        .z_ini(z_ini(params, 3))
        .b_tilde(move |y, _| -lam * y.rows(0, 2))
        .b_check(|y| DVector::from_element(1, y[1]))
        .grad1_b_check(|_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]))
        .closed_form(ClosedForm::PartialG(log_gradient_outer(law, head(2), 4.0)))
        .build()?;
    Ok((spec, stochvol_scheme()?))
}
