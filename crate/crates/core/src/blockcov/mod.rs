//! Covariance structures of normalized increments and blocks.

mod ktilde;
mod psi;
mod schur;
mod trace;


use std::io::Write;

use nalgebra::DMatrix;

pub use ktilde::{ktilde_build, ktilde_dense, ktilde_from_parts, KTilde};
pub use psi::{psi_build, psi_dense, psi_dim, v_matrix, PsiMatrix};
pub use schur::{schur_quadratic, SchurQuadratic};
pub use trace::{g_limit, g_point, t_trace, GLimit, GLimitRow};

use crate::error::Result;

/// Writes a matrix as headerless CSV with full round-trip precision.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])))?;
    }
    w.flush()?;
    Ok(())
}
