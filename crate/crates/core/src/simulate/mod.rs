//! Path simulation, observation extraction, normalized increments and
//! partial-observation blocks.

mod io;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LamnError, Result};
use crate::model::{ModelSpec, ProjectionFrame, SchemeSpec};

pub use io::{
    read_observations_csv, read_path_csv, write_observations_csv, write_path_csv, ObservationSidecar, PathSidecar,
};

pub const DEFAULT_SUBSTEPS: usize = 16;

/// splitmix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of path `index` under `master`.
pub fn path_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Default block length `max(3, round(ln n))`.
pub fn default_block_len(n: usize) -> usize {
    ((n as f64).ln().round() as usize).max(3)
}

/// A simulated path on the fine grid `t_k = k / (n · substeps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub model: String,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub n: usize,
    pub substeps: usize,
    /// Row `k` holds the state at `t_k` in the original coordinates.
    pub states: DMatrix<f64>,
}

impl PathSample {
    pub fn fine_steps(&self) -> usize {
        self.n * self.substeps
    }

    pub fn fine_time(&self, k: usize) -> f64 {
        k as f64 / self.fine_steps() as f64
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.row(k).transpose()
    }
}

/// Simulates one path of the rotated system.
///
/// Over a fine step `δ`, `ỹ` takes an Euler–Maruyama step driven by `ΔW`.
/// `y̌` integrates its drift along the same Brownian segment:
/// `Δy̌ = b̌ δ + (∇₁b̌)ᵀ (ã ∫₀^δ W + b̃ δ²/2)`, where `∫₀^δ W` is drawn
/// jointly with `ΔW`. This keeps the `1/3` and `1/2` covariance terms of the
/// integrated coordinates exact at any substep count.
pub fn simulate_path(
    spec: &ModelSpec,
    theta: &DVector<f64>,
    n: usize,
    substeps: usize,
    seed: u64,
) -> Result<PathSample> {
    if n < 2 {
        return Err(LamnError::InvalidArgument(format!("n must be at least 2, got {n}")));
    }
    if substeps == 0 {
        return Err(LamnError::InvalidArgument("substeps must be at least 1".into()));
    }
    spec.check_theta(theta)?;
    let m = spec.dims.m;
    let kappa = spec.dims.kappa;
    let r = spec.dims.r;
    let steps = n * substeps;
    let dt = 1.0 / steps as f64;
    let sdt = dt.sqrt();
    let i_scale = dt * sdt;
    let inv_2sqrt3 = 0.5 / 3f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = spec.rotation == DMatrix::identity(m, m);
    let mut states = DMatrix::zeros(steps + 1, m);
    let mut y = spec.y_ini();
    states.set_row(0, &spec.z_ini.transpose());
    let mut dw = DVector::zeros(r);
    let mut iw = DVector::zeros(r);
    for k in 1..=steps {
        for i in 0..r {
            let xi1: f64 = rng.sample(StandardNormal);
            let xi2: f64 = rng.sample(StandardNormal);
            dw[i] = sdt * xi1;
            iw[i] = i_scale * (0.5 * xi1 + inv_2sqrt3 * xi2);
        }
        let a = spec.a_tilde(&y, theta);
        let bt = spec.b_tilde(&y, theta);
        let mut next = y.clone();
        {
            let step = &bt * dt + &a * &dw;
            let mut head = next.rows_mut(0, kappa);
            head += step;
        }
        if kappa < m {
            let bc = spec.b_check(&y);
            let g = spec.grad1_b_check(&y);
            let area = &a * &iw + &bt * (0.5 * dt * dt);
            let step = bc * dt + g.transpose() * area;
            let mut tail = next.rows_mut(kappa, m - kappa);
            tail += step;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(LamnError::NonFinite(format!("state at fine step {k} (t = {})", k as f64 * dt)));
        }
        y = next;
        if identity {
            states.set_row(k, &y.transpose());
        } else {
            states.set_row(k, &spec.to_original(&y).transpose());
        }
    }
    Ok(PathSample {
        model: spec.name.clone(),
        theta: theta.iter().copied().collect(),
        seed,
        n,
        substeps,
        states,
    })
}

/// Observations at `t = k/n`, `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub n: usize,
    pub scheme: SchemeSpec,
    /// Complete: original coordinates, `(n+1) × m`.
    /// Partial: `(Q̃₁ ỹ, y̌)`, `(n+1) × (q1 + q2)`.
    pub rows: DMatrix<f64>,
    /// Partial schemes only: the unobserved coordinates `Q̃₃ ỹ` at each time,
    /// available when the observations come from a simulated path.
    pub augmented: Option<DMatrix<f64>>,
}

impl ObservationSet {
    pub fn width(&self) -> usize {
        self.rows.ncols()
    }
}

/// Subsamples `path` at `t = k/n` and projects under `scheme`.
pub fn observe(path: &PathSample, spec: &ModelSpec, scheme: &SchemeSpec, n: usize) -> Result<ObservationSet> {
    let steps = path.fine_steps();
    if n < 2 || steps % n != 0 {
        return Err(LamnError::InvalidArgument(format!("n = {n} does not divide the path grid of {steps} steps")));
    }
    if path.states.ncols() != spec.dims.m {
        return Err(LamnError::Dimension("path width does not match the model".into()));
    }
    let stride = steps / n;
    match scheme {
        SchemeSpec::Complete => {
            let rows = DMatrix::from_fn(n + 1, spec.dims.m, |k, c| path.states[(k * stride, c)]);
            Ok(ObservationSet { n, scheme: scheme.clone(), rows, augmented: None })
        }
        SchemeSpec::Partial(p) => {
            scheme.check_model(spec)?;
            let frame = ProjectionFrame::new(p);
            let kappa = spec.dims.kappa;
            let (q1, q2, tail) = (frame.q1(), frame.q2(), frame.tail_dim());
            let mut rows = DMatrix::zeros(n + 1, q1 + q2);
            let mut aug = DMatrix::zeros(n + 1, tail);
            for k in 0..=n {
                let y = spec.to_rotated(&path.state(k * stride));
                let yt = y.rows(0, kappa);
                let first = &frame.qt1 * yt;
                let third = &frame.qt3 * yt;
                for i in 0..q1 {
                    rows[(k, i)] = first[i];
                }
                for i in 0..q2 {
                    rows[(k, q1 + i)] = y[kappa + i];
                }
                for i in 0..tail {
                    aug[(k, i)] = third[i];
                }
            }
            Ok(ObservationSet { n, scheme: scheme.clone(), rows, augmented: Some(aug) })
        }
    }
}

/// Rotated states `U x_k` of a complete observation set.
pub fn rotated_states(obs: &ObservationSet, spec: &ModelSpec) -> Result<Vec<DVector<f64>>> {
    if obs.scheme.is_partial() || obs.width() != spec.dims.m {
        return Err(LamnError::Dimension("rotated_states needs complete observations of the model".into()));
    }
    Ok((0..=obs.n).map(|k| spec.to_rotated(&obs.rows.row(k).transpose())).collect())
}

/// `X_j = diag(√n, n^{3/2}) (ΔY_j − (0, b̌(Y_{j−1})/n))` for `j = 1..=n`.
pub fn normalized_increments_complete(obs: &ObservationSet, spec: &ModelSpec) -> Result<Vec<DVector<f64>>> {
    let ys = rotated_states(obs, spec)?;
    Ok(normalized_from_rotated(&ys, spec, obs.n))
}

pub(crate) fn normalized_from_rotated(ys: &[DVector<f64>], spec: &ModelSpec, n: usize) -> Vec<DVector<f64>> {
    let m = spec.dims.m;
    let kappa = spec.dims.kappa;
    let nf = n as f64;
    let (s1, s3) = (nf.sqrt(), nf * nf.sqrt());
    ys.windows(2)
        .map(|w| {
            let mut x = &w[1] - &w[0];
            if kappa < m {
                let bc = spec.b_check(&w[0]);
                for i in 0..m - kappa {
                    x[kappa + i] = s3 * (x[kappa + i] - bc[i] / nf);
                }
            }
            for i in 0..kappa {
                x[i] *= s1;
            }
            x
        })
        .collect()
}

/// Block boundaries `t_{j,k} = (k + j e_n) / n` for `j < L_n = ⌊(n−1)/e_n⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub n: usize,
    pub e_n: usize,
    pub l_n: usize,
}

impl BlockLayout {
    pub fn new(n: usize, e_n: usize) -> Result<Self> {
        if e_n == 0 || n < 2 {
            return Err(LamnError::InvalidArgument(format!("bad block layout n = {n}, e_n = {e_n}")));
        }
        let l_n = (n - 1) / e_n;
        if l_n == 0 {
            return Err(LamnError::InvalidArgument(format!("e_n = {e_n} leaves no complete block for n = {n}")));
        }
        Ok(Self { n, e_n, l_n })
    }

    /// Observation index of `t_{j,k}`.
    pub fn index(&self, j: usize, k: usize) -> usize {
        k + j * self.e_n
    }
}

/// Which estimate of `ỹ_{t_{j,0}}` removes the drift from the first
/// integrated entry of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    /// The true state, from the augmented observation `Q̃₃ ỹ`.
    #[default]
    Augmented,
    /// The reconstruction `Ẏ_j` built from observed data only.
    Reconstructed,
}

/// One partial-observation block.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialBlock {
    pub j: usize,
    /// Stacked `(√n Q̃₁ Δỹ, n^{3/2} Δ²y̌)` for `k = 1..=e_n`, length `q · e_n`.
    pub x_prime: DVector<f64>,
    /// `Ẏ_j ∈ R^κ`.
    pub y_dot: DVector<f64>,
    /// Coefficient evaluation state `(Ẏ_j, y̌_{t_{j,0}})`.
    pub eval_state: DVector<f64>,
}

/// Forms the blocks `j = 0..L_n−1`; the remainder block is dropped.
pub fn partial_blocks(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &ModelSpec,
    frame: &ProjectionFrame,
    anchor: Anchor,
) -> Result<Vec<PartialBlock>> {
    if !obs.scheme.is_partial() {
        return Err(LamnError::InvalidArgument("partial_blocks needs a partial scheme".into()));
    }
    if layout.n != obs.n {
        return Err(LamnError::InvalidArgument("block layout and observations disagree on n".into()));
    }
    let kappa = spec.dims.kappa;
    let (q1, q2) = (frame.q1(), frame.q2());
    if obs.width() != q1 + q2 || frame.kappa() != kappa || q2 != spec.dims.m - kappa {
        return Err(LamnError::Dimension("observation width does not match the projection frame".into()));
    }
    let augmented = match anchor {
        Anchor::Augmented => Some(obs.augmented.as_ref().ok_or_else(|| {
            LamnError::InvalidArgument("augmented anchor needs the unobserved coordinates".into())
        })?),
        Anchor::Reconstructed => None,
    };
    let nf = obs.n as f64;
    let (s1, s3) = (nf.sqrt(), nf * nf.sqrt());
    let q = q1 + q2;
    let first = |k: usize| -> DVector<f64> { DVector::from_iterator(q1, (0..q1).map(|i| obs.rows[(k, i)])) };
    let check = |k: usize| -> DVector<f64> { DVector::from_iterator(q2, (0..q2).map(|i| obs.rows[(k, q1 + i)])) };
    let r1t = frame.qt1.transpose();
    let r3t = frame.qt3.transpose();
    let y_ini = spec.y_ini();
    let mut out = Vec::with_capacity(layout.l_n);
    for j in 0..layout.l_n {
        let t0 = layout.index(j, 0);
        let y_dot = if j == 0 {
            y_ini.rows(0, kappa).into_owned()
        } else {
            let dcheck = check(t0) - check(t0 - 1);
            &r1t * first(t0) + &r3t * (&frame.qt3 * (&frame.b_pinv * dcheck)) * nf
        };
        let anchor_state = match augmented {
            Some(aug) => &r1t * first(t0) + &r3t * aug.row(t0).transpose(),
            None => y_dot.clone(),
        };
        let mut x = DVector::zeros(q * layout.e_n);
        let mut prev_dcheck = DVector::zeros(q2);
        for k in 1..=layout.e_n {
            let (a, b) = (layout.index(j, k - 1), layout.index(j, k));
            let base = (k - 1) * q;
            let d1 = (first(b) - first(a)) * s1;
            x.rows_mut(base, q1).copy_from(&d1);
            let dcheck = check(b) - check(a);
            let second = if k == 1 {
                &dcheck - &frame.qt2 * &anchor_state / nf
            } else {
                &dcheck - &prev_dcheck
            };
            x.rows_mut(base + q1, q2).copy_from(&(second * s3));
            prev_dcheck = dcheck;
        }
        let mut eval_state = DVector::zeros(spec.dims.m);
        eval_state.rows_mut(0, kappa).copy_from(&y_dot);
        eval_state.rows_mut(kappa, q2).copy_from(&check(t0));
        out.push(PartialBlock { j, x_prime: x, y_dot, eval_state });
    }
    Ok(out)
}
