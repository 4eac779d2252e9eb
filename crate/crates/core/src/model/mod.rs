//! Diffusion model declarations, observation schemes and structural checks.
//!
//! Coefficients are expressed in the rotated frame `y = U x`: the first
//! `kappa` coordinates (`ỹ`) carry the noise through `ã`, the remaining
//! `m - kappa` coordinates (`y̌`) move by the drift `b̌` only.

mod builtins;
mod document;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LamnError, Result};
use crate::linalg::{self, kernel_basis, pinv};

pub use builtins::{builtin_default_law, builtin_default_theta, builtin_model, BuiltinParams, ScaleLaw, BUILTIN_NAMES};
pub use document::{ModelDocument, SchemeDocument};

/// `(y, θ) -> matrix`
pub type MatFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// `(y, θ) -> vector`
pub type VecFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// `y -> vector`
pub type StateFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// `y -> matrix`
pub type StateMatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// `(y, θ, i) -> ∂_{θ_i} matrix`
pub type ParamDerivFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, usize) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub m: usize,
    pub kappa: usize,
    pub r: usize,
    pub d: usize,
}

impl Dims {
    pub fn degenerate_dim(&self) -> usize {
        self.m - self.kappa
    }
}

/// Axis-aligned open box of admissible parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ThetaBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(LamnError::InvalidModel("theta box bounds must be nonempty and of equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
            return Err(LamnError::InvalidModel("theta box needs finite bounds with lower < upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(d: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; d], vec![upper; d])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| t > l && t < u)
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)))
    }
}

/// Closed-form information integrand shipped with a builtin model.
#[derive(Clone)]
pub enum ClosedForm {
    /// `Γ = ∫₀¹ integrand(Y_t) dt` for complete observations.
    Complete(MatFn),
    /// The limit `g` of the block traces; `Γ' = ½ ∫₀¹ g(Y_t) dt`.
    PartialG(MatFn),
}

/// One diffusion model: dimensions, coefficients, parameter box and rotation.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dims: Dims,
    pub theta_box: ThetaBox,
    /// Initial state in the original coordinates.
    pub z_ini: DVector<f64>,
    /// Orthogonal `U` with `U a = (ã; 0)`.
    pub rotation: DMatrix<f64>,
    a_tilde: MatFn,
    b_tilde: VecFn,
    b_check: StateFn,
    d_theta_a: Option<ParamDerivFn>,
    grad1_b_check: Option<StateMatFn>,
    closed_form: Option<ClosedForm>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("theta_box", &self.theta_box)
            .field("z_ini", &self.z_ini.as_slice())
            .finish_non_exhaustive()
    }
}

/// Which coefficient a parameter derivative refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coefficient {
    ATilde,
    BTilde,
}

pub struct ModelBuilder {
    name: String,
    dims: Dims,
    theta_box: Option<ThetaBox>,
    z_ini: Option<DVector<f64>>,
    rotation: Option<DMatrix<f64>>,
    a_tilde: Option<MatFn>,
    b_tilde: Option<VecFn>,
    b_check: Option<StateFn>,
    d_theta_a: Option<ParamDerivFn>,
    grad1_b_check: Option<StateMatFn>,
    closed_form: Option<ClosedForm>,
}

impl ModelBuilder {
    pub fn theta_box(mut self, b: ThetaBox) -> Self {
        self.theta_box = Some(b);
        self
    }
    pub fn z_ini(mut self, z: DVector<f64>) -> Self {
        self.z_ini = Some(z);
        self
    }
    pub fn rotation(mut self, u: DMatrix<f64>) -> Self {
        self.rotation = Some(u);
        self
    }
    pub fn a_tilde(mut self, f: impl Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.a_tilde = Some(Arc::new(f));
        self
    }
    pub fn b_tilde(mut self, f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.b_tilde = Some(Arc::new(f));
        self
    }
    pub fn b_check(mut self, f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.b_check = Some(Arc::new(f));
        self
    }
    pub fn d_theta_a(
        mut self,
        f: impl Fn(&DVector<f64>, &DVector<f64>, usize) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.d_theta_a = Some(Arc::new(f));
        self
    }
    pub fn grad1_b_check(mut self, f: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.grad1_b_check = Some(Arc::new(f));
        self
    }
    pub fn closed_form(mut self, c: ClosedForm) -> Self {
        self.closed_form = Some(c);
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let Dims { m, kappa, r, d } = self.dims;
        if kappa == 0 || kappa > m || r == 0 || d == 0 {
            return Err(LamnError::InvalidModel(format!("bad dimensions {:?}", self.dims)));
        }
        if kappa < m && 2 * kappa < m {
            return Err(LamnError::InvalidModel(format!(
                "degenerate models need m/2 <= kappa < m, got m={m}, kappa={kappa}"
            )));
        }
        let theta_box = match self.theta_box {
            Some(b) => b,
            None => ThetaBox::uniform(d, 0.1, 10.0)?,
        };
        if theta_box.dim() != d {
            return Err(LamnError::InvalidModel(format!("theta box has dimension {}, expected {d}", theta_box.dim())));
        }
        let z_ini = self.z_ini.unwrap_or_else(|| DVector::zeros(m));
        if z_ini.len() != m {
            return Err(LamnError::InvalidModel(format!("z_ini has length {}, expected {m}", z_ini.len())));
        }
        if z_ini.iter().any(|x| !x.is_finite()) {
            return Err(LamnError::InvalidModel("z_ini must be finite".into()));
        }
        let rotation = self.rotation.unwrap_or_else(|| DMatrix::identity(m, m));
        if rotation.shape() != (m, m) {
            return Err(LamnError::InvalidModel("rotation must be m x m".into()));
        }
        let orth = linalg::max_abs(&(&rotation * rotation.transpose() - DMatrix::identity(m, m)));
        if orth > 1e-12 {
            return Err(LamnError::InvalidModel(format!("rotation is not orthogonal (residual {orth:e})")));
        }
        let a_tilde = self.a_tilde.ok_or_else(|| LamnError::InvalidModel("missing a_tilde".into()))?;
        let b_tilde = self.b_tilde.unwrap_or_else(|| Arc::new(move |_, _| DVector::zeros(kappa)));
        let b_check = self.b_check.unwrap_or_else(|| Arc::new(move |_| DVector::zeros(m - kappa)));
        let spec = ModelSpec {
            name: self.name,
            dims: self.dims,
            theta_box,
            z_ini,
            rotation,
            a_tilde,
            b_tilde,
            b_check,
            d_theta_a: self.d_theta_a,
            grad1_b_check: self.grad1_b_check,
            closed_form: self.closed_form,
        };
        spec.check_shapes()?;
        Ok(spec)
    }
}

impl ModelSpec {
    pub fn builder(name: impl Into<String>, dims: Dims) -> ModelBuilder {
        ModelBuilder {
            name: name.into(),
            dims,
            theta_box: None,
            z_ini: None,
            rotation: None,
            a_tilde: None,
            b_tilde: None,
            b_check: None,
            d_theta_a: None,
            grad1_b_check: None,
            closed_form: None,
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let Dims { m, kappa, r, .. } = self.dims;
        let y = self.y_ini();
        let theta = self.theta_box.center();
        let a = self.a_tilde(&y, &theta);
        if a.shape() != (kappa, r) {
            return Err(LamnError::InvalidModel(format!("a_tilde returned {:?}, expected ({kappa}, {r})", a.shape())));
        }
        if self.b_tilde(&y, &theta).len() != kappa {
            return Err(LamnError::InvalidModel("b_tilde has wrong length".into()));
        }
        if self.b_check(&y).len() != m - kappa {
            return Err(LamnError::InvalidModel("b_check has wrong length".into()));
        }
        if self.grad1_b_check(&y).shape() != (kappa, m - kappa) {
            return Err(LamnError::InvalidModel("grad1_b_check has wrong shape".into()));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(LamnError::NonFinite("a_tilde at the initial state".into()));
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        self.dims.kappa < self.dims.m
    }

    /// Initial state in the rotated frame.
    pub fn y_ini(&self) -> DVector<f64> {
        &self.rotation * &self.z_ini
    }

    pub fn to_rotated(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.rotation * x
    }

    pub fn to_original(&self, y: &DVector<f64>) -> DVector<f64> {
        self.rotation.transpose() * y
    }

    pub fn a_tilde(&self, y: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        (self.a_tilde)(y, theta)
    }

    pub fn b_tilde(&self, y: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        (self.b_tilde)(y, theta)
    }

    pub fn b_check(&self, y: &DVector<f64>) -> DVector<f64> {
        (self.b_check)(y)
    }

    /// `ã ãᵀ(y, θ)`.
    pub fn diffusion_cov(&self, y: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let a = self.a_tilde(y, theta);
        &a * a.transpose()
    }

    /// `∂_{θ_i}(ã ãᵀ) = ∂ã ãᵀ + ã ∂ãᵀ`.
    pub fn diffusion_cov_derivative(&self, y: &DVector<f64>, theta: &DVector<f64>, i: usize) -> Result<DMatrix<f64>> {
        let a = self.a_tilde(y, theta);
        let da = self.theta_derivative(Coefficient::ATilde, y, theta, i)?;
        let prod = &da * a.transpose();
        Ok(&prod + prod.transpose())
    }

    /// `∇₁ b̌(y)`, a `kappa × (m - kappa)` matrix with entry `(l, i) = ∂_{y_l} b̌_i`.
    pub fn grad1_b_check(&self, y: &DVector<f64>) -> DMatrix<f64> {
        if let Some(g) = &self.grad1_b_check {
            return g(y);
        }
        let Dims { m, kappa, .. } = self.dims;
        let mut out = DMatrix::zeros(kappa, m - kappa);
        for l in 0..kappa {
            let h = f64::EPSILON.cbrt() * y[l].abs().max(1.0);
            let mut up = y.clone();
            let mut dn = y.clone();
            up[l] += h;
            dn[l] -= h;
            let diff = (self.b_check(&up) - self.b_check(&dn)) / (2.0 * h);
            out.set_row(l, &diff.transpose());
        }
        out
    }

    /// Parameter derivative of `ã` or `b̃`: the analytic callback when one was
    /// supplied, otherwise a central difference with step
    /// `cbrt(ε) · max(1, |θ_i|)`.
    pub fn theta_derivative(
        &self,
        which: Coefficient,
        y: &DVector<f64>,
        theta: &DVector<f64>,
        i: usize,
    ) -> Result<DMatrix<f64>> {
        if i >= self.dims.d {
            return Err(LamnError::InvalidArgument(format!("parameter index {i} >= d = {}", self.dims.d)));
        }
        if which == Coefficient::ATilde {
            if let Some(da) = &self.d_theta_a {
                return Ok(da(y, theta, i));
            }
        }
        self.theta_derivative_fd(which, y, theta, i)
    }

    /// Central-difference parameter derivative, ignoring analytic callbacks.
    pub fn theta_derivative_fd(
        &self,
        which: Coefficient,
        y: &DVector<f64>,
        theta: &DVector<f64>,
        i: usize,
    ) -> Result<DMatrix<f64>> {
        let h = f64::EPSILON.cbrt() * theta[i].abs().max(1.0);
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[i] += h;
        dn[i] -= h;
        if !self.theta_box.contains(&up) || !self.theta_box.contains(&dn) {
            return Err(LamnError::StepLeavesBox { index: i });
        }
        let eval = |t: &DVector<f64>| -> DMatrix<f64> {
            match which {
                Coefficient::ATilde => self.a_tilde(y, t),
                Coefficient::BTilde => {
                    let v = self.b_tilde(y, t);
                    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
                }
            }
        };
        Ok((eval(&up) - eval(&dn)) / (2.0 * h))
    }

    pub fn has_analytic_derivative(&self) -> bool {
        self.d_theta_a.is_some()
    }

    pub fn closed_form(&self) -> Option<&ClosedForm> {
        self.closed_form.as_ref()
    }

    /// A copy of this model with the analytic `∂_θ ã` removed, so every
    /// parameter derivative goes through finite differences.
    pub fn without_analytic_derivatives(&self) -> ModelSpec {
        let mut out = self.clone();
        out.d_theta_a = None;
        out
    }

    pub fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if !self.theta_box.contains(theta) {
            return Err(LamnError::OutOfBox { theta: theta.iter().copied().collect() });
        }
        Ok(())
    }
}

/// Partial observation scheme: `Q ỹ` and `y̌` are observed, with `dy̌ = B ỹ dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialScheme {
    pub q: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q1: usize,
    pub q2: usize,
}

impl PartialScheme {
    pub fn new(q: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let kappa = q.nrows();
        if q.ncols() != kappa || kappa == 0 {
            return Err(LamnError::InvalidScheme("Q must be a nonempty square matrix".into()));
        }
        if b.ncols() != kappa || b.nrows() == 0 {
            return Err(LamnError::InvalidScheme("B must have kappa columns and at least one row".into()));
        }
        if q.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(LamnError::InvalidScheme("Q and B must be finite".into()));
        }
        let idem = linalg::max_abs(&(&q * &q - &q));
        if idem > 1e-12 {
            return Err(LamnError::InvalidScheme(format!("Q is not a projection: |Q^2 - Q| = {idem:e}")));
        }
        let asym = linalg::max_abs(&(&q - q.transpose()));
        if asym > 1e-12 {
            return Err(LamnError::InvalidScheme(format!("Q is not symmetric: |Q - Q^T| = {asym:e}")));
        }
        let bbt = &b * b.transpose();
        if !(linalg::min_eigenvalue(&bbt) > 1e-12 * linalg::max_abs(&bbt).max(1.0)) {
            return Err(LamnError::InvalidScheme("B B^T is not positive definite".into()));
        }
        let q1 = q.trace().round() as usize;
        let q2 = b.nrows();
        let ker_b = kernel_basis(&b);
        let outside = (DMatrix::identity(kappa, kappa) - &q) * &ker_b;
        let leak = linalg::max_abs(&outside);
        if leak > 1e-10 {
            return Err(LamnError::InvalidScheme(format!("Ker(B) is not contained in Im(Q) (residual {leak:e})")));
        }
        if q1 >= kappa {
            return Err(LamnError::InvalidScheme(format!("rank(Q) = {q1} must be < kappa = {kappa}")));
        }
        if q1 + q2 < kappa {
            return Err(LamnError::InvalidScheme(format!("q = {} < kappa = {kappa}", q1 + q2)));
        }
        Ok(Self { q, b, q1, q2 })
    }

    pub fn kappa(&self) -> usize {
        self.q.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchemeSpec {
    Complete,
    Partial(PartialScheme),
}

impl SchemeSpec {
    pub fn is_partial(&self) -> bool {
        matches!(self, SchemeSpec::Partial(_))
    }

    pub fn partial(&self) -> Option<&PartialScheme> {
        match self {
            SchemeSpec::Partial(p) => Some(p),
            SchemeSpec::Complete => None,
        }
    }

    /// Checks that a partial scheme matches the model: `Q` is `kappa × kappa`,
    /// `B` is `(m - kappa) × kappa`, and `b̌(y) = B ỹ` at a few states.
    pub fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        let SchemeSpec::Partial(p) = self else { return Ok(()) };
        let Dims { m, kappa, .. } = spec.dims;
        if p.kappa() != kappa || p.b.nrows() != m - kappa {
            return Err(LamnError::InvalidScheme(format!(
                "scheme shapes Q {:?}, B {:?} do not fit m={m}, kappa={kappa}",
                p.q.shape(),
                p.b.shape()
            )));
        }
        for s in 0..4 {
            let y = DVector::from_fn(m, |i, _| ((i + 1) as f64 * (s as f64 + 0.5)).sin());
            let resid = (spec.b_check(&y) - &p.b * y.rows(0, kappa)).amax();
            if resid > 1e-10 {
                return Err(LamnError::InvalidScheme(format!(
                    "partial observation needs b_check(y) = B y_tilde (residual {resid:e})"
                )));
            }
        }
        Ok(())
    }
}

/// Row bases `Q̃₁ = R₁ Q`, `Q̃₂ = B`, `Q̃₃ = R₃ (I - Q)` for a partial scheme.
///
/// `R₁` and `R₃` have orthonormal rows spanning `Im(Q)` and `Im(I - Q)`, so
/// `R₁ᵀ Q̃₁ = Q` and `R₃ᵀ Q̃₃ = I - Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFrame {
    pub qt1: DMatrix<f64>,
    pub qt2: DMatrix<f64>,
    pub qt3: DMatrix<f64>,
    pub b_pinv: DMatrix<f64>,
}

impl ProjectionFrame {
    pub fn new(scheme: &PartialScheme) -> Self {
        let kappa = scheme.kappa();
        let q1 = scheme.q1;
        let complement = DMatrix::identity(kappa, kappa) - &scheme.q;
        let qt1 = linalg::column_space_basis(&scheme.q, q1).transpose();
        let qt3 = linalg::column_space_basis(&complement, kappa - q1).transpose();
        Self { qt1, qt2: scheme.b.clone(), qt3, b_pinv: pinv(&scheme.b) }
    }

    pub fn kappa(&self) -> usize {
        self.qt2.ncols()
    }
    pub fn q1(&self) -> usize {
        self.qt1.nrows()
    }
    pub fn q2(&self) -> usize {
        self.qt2.nrows()
    }
    pub fn q(&self) -> usize {
        self.q1() + self.q2()
    }
    /// `kappa - q1`, the size of the tail block.
    pub fn tail_dim(&self) -> usize {
        self.qt3.nrows()
    }

    /// `Q̃_i` for `i ∈ {1, 2, 3}`.
    pub fn qt(&self, i: usize) -> &DMatrix<f64> {
        match i {
            1 => &self.qt1,
            2 => &self.qt2,
            3 => &self.qt3,
            _ => panic!("frame index must be 1, 2 or 3"),
        }
    }

    /// `‖Q̃₃ B⁺ B − Q̃₃‖_∞`.
    pub fn reconstruction_residual(&self) -> f64 {
        linalg::max_abs(&(&self.qt3 * &self.b_pinv * &self.qt2 - &self.qt3))
    }
}

/// Per-probe residuals of the structural conditions.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeDiagnostics {
    pub y: Vec<f64>,
    pub theta: Vec<f64>,
    /// Smallest eigenvalue of `ã ãᵀ`.
    pub min_eig_aat: f64,
    /// `max_v ‖∂_θ ã v‖` over an orthonormal basis of `Ker(ã)`.
    pub kernel_residual: f64,
    /// `max_w ‖Mᵀ ∂_θ ã ã⁺ w‖` over `Ker(Mᵀ)` where `Mᵀ` is `(∇₁b̌)ᵀ` or `B`.
    pub drift_kernel_residual: f64,
    /// `‖Q M − M Q‖` for `M = ∂_θ ã ã⁺` (partial schemes only).
    pub commutation_residual: Option<f64>,
    pub scale: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub probes: Vec<ProbeDiagnostics>,
    pub pass: bool,
}

/// Evaluates the kernel-inclusion and commutation conditions at each probe.
///
/// A probe passes when every residual is at most `1e-8 · scale`, with
/// `scale = max(1, ‖∂_θ ã‖ ‖ã⁺‖)`, and `ã ãᵀ` is positive definite.
pub fn validate_conditions(
    spec: &ModelSpec,
    scheme: &SchemeSpec,
    probes: &[(DVector<f64>, DVector<f64>)],
) -> Result<ConditionReport> {
    if probes.is_empty() {
        return Err(LamnError::InvalidArgument("validate_conditions needs at least one probe".into()));
    }
    let d = spec.dims.d;
    let mut out = Vec::with_capacity(probes.len());
    for (y, theta) in probes {
        spec.check_theta(theta)?;
        let a = spec.a_tilde(y, theta);
        if a.iter().any(|x| !x.is_finite()) {
            return Err(LamnError::NonFinite(format!("a_tilde at y={:?}", y.as_slice())));
        }
        let a_pinv = pinv(&a);
        let ker_a = kernel_basis(&a);
        let drift_map: Option<DMatrix<f64>> = match scheme {
            SchemeSpec::Partial(p) => Some(p.b.clone()),
            SchemeSpec::Complete if spec.is_degenerate() => Some(spec.grad1_b_check(y).transpose()),
            SchemeSpec::Complete => None,
        };
        let ker_drift = drift_map.as_ref().map(kernel_basis);
        let mut kernel_residual: f64 = 0.0;
        let mut drift_residual: f64 = 0.0;
        let mut commutation: Option<f64> = scheme.partial().map(|_| 0.0);
        let mut scale: f64 = 1.0;
        for i in 0..d {
            let da = spec.theta_derivative(Coefficient::ATilde, y, theta, i)?;
            if da.iter().any(|x| !x.is_finite()) {
                return Err(LamnError::NonFinite(format!("d_theta a_tilde at y={:?}", y.as_slice())));
            }
            scale = scale.max(da.norm() * a_pinv.norm());
            if ker_a.ncols() > 0 {
                kernel_residual = kernel_residual.max((&da * &ker_a).column_iter().map(|c| c.norm()).fold(0.0, f64::max));
            }
            let m_i = &da * &a_pinv;
            if let (Some(map), Some(ker)) = (&drift_map, &ker_drift) {
                if ker.ncols() > 0 {
                    let r = (map * &m_i * ker).column_iter().map(|c| c.norm()).fold(0.0, f64::max);
                    drift_residual = drift_residual.max(r);
                }
            }
            if let (Some(p), Some(c)) = (scheme.partial(), commutation.as_mut()) {
                *c = c.max((&p.q * &m_i - &m_i * &p.q).norm());
            }
        }
        let min_eig = linalg::min_eigenvalue(&(&a * a.transpose()));
        let tol = 1e-8 * scale;
        let pass = min_eig > 0.0
            && kernel_residual <= tol
            && drift_residual <= tol
            && commutation.map_or(true, |c| c <= tol);
        out.push(ProbeDiagnostics {
            y: y.iter().copied().collect(),
            theta: theta.iter().copied().collect(),
            min_eig_aat: min_eig,
            kernel_residual,
            drift_kernel_residual: drift_residual,
            commutation_residual: commutation,
            scale,
            pass,
        });
    }
    let pass = out.iter().all(|p| p.pass);
    Ok(ConditionReport { probes: out, pass })
}

#[cfg(test)]
mod tests;
