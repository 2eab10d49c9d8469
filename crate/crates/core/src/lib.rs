//! Numerical solver for the master equation of mean field games with common
//! noise and no idiosyncratic noise.
//!
//! The decoupling field `∂ₓV(t, x, μ)` is computed by a Picard fixed point on
//! a forward-backward particle system over short windows, stitched backward
//! in time. Closed-form linear-quadratic solutions, displacement-monotonicity
//! checks and a CLI are included.

pub mod engine;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod master;
pub mod measure;
pub mod model;
pub mod monotone;
pub mod oracle_lq;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits so text output round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
