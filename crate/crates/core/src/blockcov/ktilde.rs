use nalgebra::{DMatrix, DVector};

use crate::error::{LamnError, Result};
use crate::linalg::{self, spd_inverse};
use crate::model::ModelSpec;

/// Covariance of one normalized increment under the Gaussian approximation:
/// `K̃ = [[P, P G/2], [Gᵀ P/2, Gᵀ P G/3]]` with `P = ã ãᵀ`, `G = ∇₁b̌`.
#[derive(Debug, Clone, PartialEq)]
pub struct KTilde {
    pub kappa: usize,
    pub p: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// `S = Gᵀ P G / 12`.
    pub s: DMatrix<f64>,
    pub dense: DMatrix<f64>,
    /// Blockwise inverse `[[P⁻¹ + G S⁻¹ Gᵀ/4, −G S⁻¹/2], [−S⁻¹ Gᵀ/2, S⁻¹]]`.
    pub inverse: DMatrix<f64>,
    /// `log det K̃ = log det P + log det S`.
    pub log_det: f64,
}

/// Dense `K̃` from its two ingredients.
pub fn ktilde_dense(p: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let kappa = p.nrows();
    let rest = g.ncols();
    let m = kappa + rest;
    let pg = p * g;
    let mut k = DMatrix::zeros(m, m);
    k.view_mut((0, 0), (kappa, kappa)).copy_from(p);
    k.view_mut((0, kappa), (kappa, rest)).copy_from(&(&pg * 0.5));
    k.view_mut((kappa, 0), (rest, kappa)).copy_from(&(pg.transpose() * 0.5));
    k.view_mut((kappa, kappa), (rest, rest)).copy_from(&(g.transpose() * &pg / 3.0));
    k
}

pub fn ktilde_from_parts(p: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<KTilde> {
    let kappa = p.nrows();
    if p.ncols() != kappa || g.nrows() != kappa {
        return Err(LamnError::Dimension("K̃ needs square P and G with kappa rows".into()));
    }
    let rest = g.ncols();
    let p_inv = spd_inverse(p, "a_tilde a_tilde^T")?;
    let dense = ktilde_dense(p, g);
    if rest == 0 {
        return Ok(KTilde {
            kappa,
            p: p.clone(),
            g: g.clone(),
            s: DMatrix::zeros(0, 0),
            dense,
            inverse: p_inv.inverse,
            log_det: p_inv.log_det,
        });
    }
    let g_sv = linalg::min_singular_value(g);
    if !(g_sv > linalg::KERNEL_RTOL * g.norm()) {
        return Err(LamnError::Singular { what: "S (grad b_check is rank deficient)".into(), min_sv: g_sv });
    }
    let s = g.transpose() * p * g / 12.0;
    let s_inv = spd_inverse(&s, "S").map_err(|e| match e {
        LamnError::IllConditioned { .. } | LamnError::Singular { .. } => {
            LamnError::Singular { what: "S".into(), min_sv: linalg::min_singular_value(&s) }
        }
        other => other,
    })?;
    let gs = g * &s_inv.inverse;
    let m = kappa + rest;
    let mut inverse = DMatrix::zeros(m, m);
    inverse
        .view_mut((0, 0), (kappa, kappa))
        .copy_from(&(&p_inv.inverse + &gs * g.transpose() * 0.25));
    inverse.view_mut((0, kappa), (kappa, rest)).copy_from(&(&gs * -0.5));
    inverse.view_mut((kappa, 0), (rest, kappa)).copy_from(&(gs.transpose() * -0.5));
    inverse.view_mut((kappa, kappa), (rest, rest)).copy_from(&s_inv.inverse);
    Ok(KTilde {
        kappa,
        p: p.clone(),
        g: g.clone(),
        s,
        dense,
        inverse: linalg::symmetrize(&inverse),
        log_det: p_inv.log_det + s_inv.log_det,
    })
}

/// `K̃(z₀, θ)` for a model in its rotated frame.
pub fn ktilde_build(spec: &ModelSpec, z0: &DVector<f64>, theta: &DVector<f64>) -> Result<KTilde> {
    let p = spec.diffusion_cov(z0, theta);
    let g = spec.grad1_b_check(z0);
    ktilde_from_parts(&p, &g)
}
