//! Model data: Hamiltonian, terminal cost, their derivatives and the
//! structural constants the solver relies on.

mod bundled;
mod legendre;
mod validate;

pub use bundled::{bundled_names, bundled_spec, BundledParams, QuadraticFamily};
pub use legendre::legendre_transform;
pub use validate::{
    fd_consistency_check, validate_assumptions, AssumptionEntry, AssumptionReport, FdEntry,
    FdReport, Probe, ProbeSampler,
};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::measure::EmpiricalMeasure;

/// Hamiltonian `H(x, μ, p)` and terminal cost `G(x, μ)` with derivatives.
///
/// Matrix conventions: `h_dxp[i][j] = ∂x_i ∂p_j H`. Measure derivatives are
/// Lions derivatives per unit mass at the atom location `y`:
/// `h_dxmu[i][j] = ∂_{μ_j}(∂x_i H)(x, μ, y, p)`, likewise for `h_dpmu` and `g_dxmu`.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;

    fn hamiltonian(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> f64;
    fn h_dx(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Vector;
    fn h_dp(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Vector;
    fn h_dxx(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Matrix;
    fn h_dxp(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Matrix;
    fn h_dpp(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Matrix;
    fn h_dxmu(&self, x: &[f64], mu: &EmpiricalMeasure, y: &[f64], p: &[f64]) -> Matrix;
    fn h_dpmu(&self, x: &[f64], mu: &EmpiricalMeasure, y: &[f64], p: &[f64]) -> Matrix;

    fn terminal(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64;
    fn g_dx(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vector;
    fn g_dxx(&self, x: &[f64], mu: &EmpiricalMeasure) -> Matrix;
    fn g_dxmu(&self, x: &[f64], mu: &EmpiricalMeasure, y: &[f64]) -> Matrix;
}

/// Structural bounds. `coercivity_floor` bounds `H - ⟨∂ₚH, p⟩` from above and
/// `terminal_floor` bounds `-G`; both default to the Lipschitz constants but
/// may be larger for models whose bound only holds on the probe box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub l_h: f64,
    pub l_g: f64,
    pub c0: f64,
    pub coercivity_floor: f64,
    pub terminal_floor: f64,
}

impl ModelConstants {
    pub fn new(l_h: f64, l_g: f64, c0: f64) -> Self {
        Self {
            l_h,
            l_g,
            c0,
            coercivity_floor: l_h,
            terminal_floor: l_g,
        }
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub beta: f64,
    pub maps: Arc<dyn Model>,
    pub constants: ModelConstants,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("beta", &self.beta)
            .field("constants", &self.constants)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        maps: Arc<dyn Model>,
        horizon: f64,
        beta: f64,
        constants: ModelConstants,
    ) -> Result<Self> {
        let spec = Self {
            name: maps.name().to_string(),
            dim: maps.dim(),
            horizon,
            beta,
            maps,
            constants,
        };
        spec.check_fields()?;
        Ok(spec)
    }

    pub fn check_fields(&self) -> Result<()> {
        if self.dim == 0 || self.dim != self.maps.dim() {
            return Err(Error::invalid("model dimension must be positive and match the maps"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon {} must be positive", self.horizon)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("noise intensity {} must be >= 0", self.beta)));
        }
        let c = &self.constants;
        for (name, v) in [
            ("L_H", c.l_h),
            ("L_G", c.l_g),
            ("c0", c.c0),
            ("coercivity floor", c.coercivity_floor),
            ("terminal floor", c.terminal_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        let mut s = self.clone();
        s.horizon = horizon;
        s.check_fields()?;
        Ok(s)
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut s = self.clone();
        s.beta = beta;
        s.check_fields()?;
        Ok(s)
    }
}
