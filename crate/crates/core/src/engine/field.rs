use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::grid::{GridFn, SpatialGrid, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::measure::EmpiricalMeasure;
use crate::model::Model;

/// Decoupling field `∂ₓV(t_k, x, ρ_k)` on the nodes of a time grid and a
/// spatial grid. Values are the scenario average; `stderr` holds the Monte
/// Carlo standard error of that average (zero for a single scenario).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecouplingField {
    pub time: TimeGrid,
    pub space: Arc<SpatialGrid>,
    pub scenarios: usize,
    pub slices: Vec<GridFn>,
    pub stderr: Vec<GridFn>,
}

impl DecouplingField {
    pub fn zeros(time: TimeGrid, space: Arc<SpatialGrid>, scenarios: usize) -> Self {
        let d = space.dim;
        let blank = GridFn::zeros(space.clone(), d);
        Self {
            time,
            space,
            scenarios,
            slices: vec![blank.clone(); time.steps + 1],
            stderr: vec![blank; time.steps + 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    #[inline]
    pub fn at(&self, k: usize) -> &GridFn {
        &self.slices[k]
    }

    pub fn eval(&self, k: usize, x: &[f64]) -> Vector {
        self.slices[k].eval(x)
    }

    /// Linear interpolation in time between nodes.
    pub fn eval_time(&self, t: f64, x: &[f64]) -> Result<Vector> {
        let s = (t - self.time.t0) / self.time.dt;
        if !(s >= -1e-9 && s <= self.time.steps as f64 + 1e-9) {
            return Err(Error::invalid(format!(
                "t = {t} outside [{}, {}]",
                self.time.t0,
                self.time.t1()
            )));
        }
        let s = s.clamp(0.0, self.time.steps as f64);
        let k = (s.floor() as usize).min(self.time.steps);
        let f = s - k as f64;
        let a = self.eval(k, x);
        if f < 1e-12 || k == self.time.steps {
            return Ok(a);
        }
        let b = self.eval(k + 1, x);
        Ok(a.iter().zip(&b).map(|(u, v)| u + f * (v - u)).collect())
    }

    /// Sup-norm distance over all nodes.
    pub fn sup_distance(&self, other: &DecouplingField) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| crate::linalg::max_abs_diff(&a.values, &b.values))
            .fold(0.0, f64::max)
    }

    /// `self <- self + λ (other - self)`.
    pub fn relax_towards(&mut self, other: &DecouplingField, lambda: f64) {
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            for (u, v) in a.values.iter_mut().zip(&b.values) {
                *u += lambda * (v - *u);
            }
        }
        self.stderr = other.stderr.clone();
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().all(|s| s.values.iter().all(|v| v.is_finite()))
    }

    /// Largest standard error at the first node.
    pub fn max_stderr_at_start(&self) -> f64 {
        self.stderr[0].values.iter().fold(0.0, |a, &b| f64::max(a, b))
    }
}

/// Terminal condition of a window: the model's `∂ₓG` or a supplied field.
#[derive(Clone, Debug)]
pub enum TerminalData {
    Gradient,
    Grid(GridFn),
}

impl TerminalData {
    #[inline]
    pub fn eval(&self, model: &dyn Model, x: &[f64], rho: &EmpiricalMeasure) -> Vector {
        match self {
            TerminalData::Gradient => model.g_dx(x, rho),
            TerminalData::Grid(g) => g.eval(x),
        }
    }
}
