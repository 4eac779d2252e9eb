//! Degenerate-diffusion LAMN toolkit: models, simulation, block covariances,
//! score statistics, information matrices and Monte Carlo checks.

pub mod blockcov;
pub mod error;
pub mod information;
pub mod lamn_mc;
pub mod linalg;
pub mod model;
pub mod qmle;
pub mod score;
pub mod simulate;
pub mod stats;

pub use error::{LamnError, Result};
