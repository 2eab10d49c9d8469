use serde::{Deserialize, Serialize};

use super::field::{DecouplingField, TerminalData};
use super::forward::{simulate_forward, update_field, ScenarioFlow};
use super::grid::{GridFn, SpatialGrid, TimeGrid};
use super::noise::NoiseWindow;
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::model::Model;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardParams {
    /// Stop when the sup-norm residual over all nodes drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial relaxation weight; halved whenever the residual grows.
    pub damping: f64,
    /// Consecutive residual increases that count as non-contraction.
    pub stall_limit: usize,
}

impl Default for PicardParams {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iter: 60,
            damping: 1.0,
            stall_limit: 3,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PicardDiagnostics {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// `residuals[n + 1] / residuals[n]`.
    pub ratios: Vec<f64>,
    pub final_damping: f64,
    pub converged: bool,
}

impl PicardDiagnostics {
    /// Largest contraction ratio from iteration `from` on (1-based).
    pub fn max_ratio_after(&self, from: usize) -> Option<f64> {
        self.ratios
            .iter()
            .skip(from.saturating_sub(1))
            .copied()
            .reduce(f64::max)
    }
}

/// Supplies the terminal field of a window from the particle flows of the
/// current iterate, e.g. by solving the next window from the terminal measure.
pub trait BoundaryLink {
    fn terminal_field(&mut self, flows: &[ScenarioFlow], tol: f64) -> Result<GridFn>;
}

pub enum TerminalSpec<'a> {
    Gradient,
    Linked(&'a mut dyn BoundaryLink),
}

#[derive(Clone, Debug)]
pub struct PicardSolution {
    pub field: DecouplingField,
    pub flows: Vec<ScenarioFlow>,
    pub terminal: TerminalData,
    pub diagnostics: PicardDiagnostics,
}

/// Inputs shared by every iteration of one window solve.
#[derive(Clone, Copy)]
pub struct WindowProblem<'a> {
    pub model: &'a dyn Model,
    pub beta: f64,
    pub time: TimeGrid,
    pub space: &'a Arc<SpatialGrid>,
    pub noise: NoiseWindow<'a>,
    pub cloud: &'a EmpiricalMeasure,
}

/// Fixed point `field = U(field)` where `U` simulates the particles under
/// `field` and recomputes the field by the backward expectation update.
pub fn picard_solve(
    prob: &WindowProblem<'_>,
    params: &PicardParams,
    terminal: &mut TerminalSpec<'_>,
    warm: Option<&DecouplingField>,
) -> Result<PicardSolution> {
    if !(params.tol > 0.0) || params.max_iter == 0 || !(params.damping > 0.0 && params.damping <= 1.0) {
        return Err(Error::invalid("Picard needs tol > 0, max_iter > 0, damping in (0, 1]"));
    }
    let (t0, t1) = (prob.time.t0, prob.time.t1());
    let scenarios = super::forward::effective_scenarios(prob.beta, &prob.noise);
    let mut field = match warm {
        Some(w) if w.time == prob.time && *w.space == **prob.space => w.clone(),
        _ => DecouplingField::zeros(prob.time, prob.space.clone(), scenarios),
    };
    let mut diag = PicardDiagnostics {
        final_damping: params.damping,
        ..Default::default()
    };
    let mut lambda = params.damping;
    let mut stalls = 0;
    let non_contraction = |diag: &PicardDiagnostics, it: usize| Error::NonContraction {
        t0,
        t1,
        iteration: it,
        ratios: diag.ratios.clone(),
    };
    for it in 1..=params.max_iter {
        let flows = match simulate_forward(prob.model, prob.beta, &field, prob.cloud, &prob.noise) {
            Ok(f) => f,
            Err(e) if it > 1 && is_blowup(&e) => return Err(non_contraction(&diag, it)),
            Err(e) => return Err(e),
        };
        let term = match terminal {
            TerminalSpec::Gradient => TerminalData::Gradient,
            TerminalSpec::Linked(link) => {
                let inner_tol = diag
                    .residuals
                    .last()
                    .map_or(params.tol, |r| (0.1 * r).max(params.tol));
                TerminalData::Grid(link.terminal_field(&flows, inner_tol)?)
            }
        };
        let next = match update_field(prob.model, prob.beta, &field, &flows, &prob.noise, &term) {
            Ok(n) if n.is_finite() => n,
            Ok(_) if it > 1 => return Err(non_contraction(&diag, it)),
            Ok(_) => {
                return Err(Error::NonFinite {
                    what: "decoupling field".into(),
                })
            }
            Err(e) if it > 1 && is_blowup(&e) => return Err(non_contraction(&diag, it)),
            Err(e) => return Err(e),
        };
        let res = field.sup_distance(&next);
        if let Some(&prev) = diag.residuals.last() {
            let ratio = if prev > 0.0 { res / prev } else { 0.0 };
            diag.ratios.push(ratio);
            if ratio >= 1.0 {
                stalls += 1;
                lambda *= 0.5;
            } else {
                stalls = 0;
            }
        }
        diag.residuals.push(res);
        diag.iterations = it;
        diag.final_damping = lambda;
        if res <= params.tol {
            diag.converged = true;
            let flows = simulate_forward(prob.model, prob.beta, &next, prob.cloud, &prob.noise)?;
            return Ok(PicardSolution {
                field: next,
                flows,
                terminal: term,
                diagnostics: diag,
            });
        }
        if stalls >= params.stall_limit {
            return Err(non_contraction(&diag, it));
        }
        field.relax_towards(&next, lambda);
    }
    Err(Error::NoConvergence {
        t0,
        t1,
        iterations: params.max_iter,
        residual: diag.residuals.last().copied().unwrap_or(f64::NAN),
    })
}

fn is_blowup(e: &Error) -> bool {
    matches!(e, Error::ParticleEscape { .. } | Error::NonFinite { .. })
}
