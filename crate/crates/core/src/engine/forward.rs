use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::field::{DecouplingField, TerminalData};
use super::noise::NoiseWindow;
use crate::error::{Error, Result};
use crate::linalg::{zeros, Vector};
use crate::measure::EmpiricalMeasure;
use crate::model::Model;

/// Particle system of one common-noise scenario: the measure at every time
/// node and `Y_k = field(t_k, X_k)` for every particle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioFlow {
    pub scenario: usize,
    pub snapshots: Vec<EmpiricalMeasure>,
    pub y: Vec<f64>,
    /// Optional `Z⁰` reconstruction, `steps × N` blocks of `d×d`.
    pub z0: Option<Vec<f64>>,
}

impl ScenarioFlow {
    pub fn particles(&self) -> usize {
        self.snapshots[0].len()
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].dim()
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    #[inline]
    pub fn x(&self, k: usize, i: usize) -> &[f64] {
        self.snapshots[k].point(i)
    }

    #[inline]
    pub fn y(&self, k: usize, i: usize) -> &[f64] {
        let d = self.dim();
        let o = (k * self.particles() + i) * d;
        &self.y[o..o + d]
    }

    pub fn terminal_measure(&self) -> &EmpiricalMeasure {
        &self.snapshots[self.snapshots.len() - 1]
    }
}

/// Number of scenarios the engine actually runs: one when there is no common noise.
pub fn effective_scenarios(beta: f64, noise: &NoiseWindow) -> usize {
    if beta == 0.0 {
        1
    } else {
        noise.scenarios()
    }
}

/// Euler scheme `X_{k+1} = X_k - ∂ₚH(X_k, ρ_k, field(t_k, X_k)) dt + β ΔB⁰_k`
/// with the same increment for every particle of a scenario.
pub fn simulate_forward(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    cloud: &EmpiricalMeasure,
    noise: &NoiseWindow,
) -> Result<Vec<ScenarioFlow>> {
    let steps = field.time.steps;
    if noise.steps != steps {
        return Err(Error::invalid("noise window and field have different step counts"));
    }
    if cloud.dim() != field.dim() {
        return Err(Error::invalid("cloud and field dimensions differ"));
    }
    let m_count = effective_scenarios(beta, noise);
    (0..m_count)
        .into_par_iter()
        .map(|m| simulate_scenario(model, beta, field, cloud, noise, m))
        .collect()
}

fn simulate_scenario(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    cloud: &EmpiricalMeasure,
    noise: &NoiseWindow,
    m: usize,
) -> Result<ScenarioFlow> {
    let steps = field.time.steps;
    let dt = field.time.dt;
    let d = cloud.dim();
    let n = cloud.len();
    let weights = cloud.shared_weights();
    let mut snapshots = Vec::with_capacity(steps + 1);
    snapshots.push(cloud.clone());
    let mut y = vec![0.0; (steps + 1) * n * d];
    for k in 0..=steps {
        let slice = field.at(k);
        let cur = &snapshots[k];
        let yk = &mut y[k * n * d..(k + 1) * n * d];
        for i in 0..n {
            slice.eval_into(cur.point(i), &mut yk[i * d..(i + 1) * d]);
        }
        if k == steps {
            break;
        }
        let inc = noise.increment(m, k);
        let mut next = Vec::with_capacity(n * d);
        for i in 0..n {
            let x = cur.point(i);
            let hp = model.h_dp(x, cur, &yk[i * d..(i + 1) * d]);
            for c in 0..d {
                next.push(x[c] - hp[c] * dt + beta * inc[c]);
            }
            let moved = &next[i * d..];
            if !field.space.in_guard(moved) {
                return Err(escape(field.time.node(k + 1), moved));
            }
        }
        snapshots.push(EmpiricalMeasure::from_parts(d, next, weights.clone()));
    }
    Ok(ScenarioFlow {
        scenario: m,
        snapshots,
        y,
        z0: None,
    })
}

fn escape(time: f64, x: &[f64]) -> Error {
    if x.iter().all(|v| v.is_finite()) {
        Error::ParticleEscape {
            time,
            norm: crate::linalg::norm(x),
        }
    } else {
        Error::NonFinite {
            what: format!("particle state at t = {time}"),
        }
    }
}

/// Runs the characteristic started at `x` at node `k` through scenario `m`
/// and returns `terminal(X_T) - Σ_{j>=k} ∂ₓH(X_j, ρ_j, field(t_j, X_j)) dt`.
#[allow(clippy::too_many_arguments)]
pub fn characteristic_value(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    flow: &ScenarioFlow,
    noise: &NoiseWindow,
    terminal: &TerminalData,
    k: usize,
    x0: &[f64],
) -> Result<Vector> {
    let steps = field.time.steps;
    let dt = field.time.dt;
    let d = x0.len();
    let mut x: Vector = x0.iter().copied().collect();
    let mut acc = zeros(d);
    let mut p = zeros(d);
    for j in k..steps {
        let snap = &flow.snapshots[j];
        field.at(j).eval_into(&x, &mut p);
        let hx = model.h_dx(&x, snap, &p);
        let hp = model.h_dp(&x, snap, &p);
        let inc = noise.increment(flow.scenario, j);
        for c in 0..d {
            acc[c] -= hx[c] * dt;
            x[c] += -hp[c] * dt + beta * inc[c];
        }
        if !field.space.in_guard(&x) {
            return Err(escape(field.time.node(j + 1), &x));
        }
    }
    let g = terminal.eval(model, &x, flow.terminal_measure());
    for c in 0..d {
        acc[c] += g[c];
    }
    Ok(acc)
}

/// Characteristic path `X_j`, `j = k..=steps`, row-major.
pub fn characteristic_path(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    flow: &ScenarioFlow,
    noise: &NoiseWindow,
    k: usize,
    x0: &[f64],
) -> Result<Vec<f64>> {
    let steps = field.time.steps;
    let dt = field.time.dt;
    let d = x0.len();
    let mut out = Vec::with_capacity((steps - k + 1) * d);
    out.extend_from_slice(x0);
    let mut p = zeros(d);
    for j in k..steps {
        let x = &out[(j - k) * d..(j - k + 1) * d];
        field.at(j).eval_into(x, &mut p);
        let hp = model.h_dp(x, &flow.snapshots[j], &p);
        let inc = noise.increment(flow.scenario, j);
        let next: Vector = (0..d).map(|c| x[c] - hp[c] * dt + beta * inc[c]).collect();
        if !field.space.in_guard(&next) {
            return Err(escape(field.time.node(j + 1), &next));
        }
        out.extend_from_slice(&next);
    }
    Ok(out)
}

/// Scenario mean and standard error of [`characteristic_value`] at each query `(k, x)`.
pub fn backward_expectation_update(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    flows: &[ScenarioFlow],
    noise: &NoiseWindow,
    terminal: &TerminalData,
    queries: &[(usize, Vector)],
) -> Result<Vec<(Vector, Vector)>> {
    queries
        .par_iter()
        .map(|(k, x)| {
            if *k > field.time.steps {
                return Err(Error::invalid(format!("time node {k} out of range")));
            }
            let vals = flows
                .iter()
                .map(|f| characteristic_value(model, beta, field, f, noise, terminal, *k, x))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean_and_stderr(&vals, x.len(), noise.paired()))
        })
        .collect()
}

/// Mean over scenarios and its standard error. With `paired` the values come
/// in antithetic pairs and the error is taken over the pair means.
pub(crate) fn mean_and_stderr(vals: &[Vector], d: usize, paired: bool) -> (Vector, Vector) {
    let paired = paired && vals.len() >= 4 && vals.len() % 2 == 0;
    let units: Vec<Vector> = if paired {
        vals.chunks(2)
            .map(|p| (0..d).map(|c| 0.5 * (p[0][c] + p[1][c])).collect())
            .collect()
    } else {
        vals.to_vec()
    };
    let m = units.len() as f64;
    let mut mean = zeros(d);
    for v in &units {
        for c in 0..d {
            mean[c] += v[c] / m;
        }
    }
    let mut se = zeros(d);
    if units.len() > 1 {
        for v in &units {
            for c in 0..d {
                se[c] += (v[c] - mean[c]).powi(2);
            }
        }
        for s in se.iter_mut() {
            *s = (*s / (m - 1.0) / m).sqrt();
        }
    }
    (mean, se)
}

/// Full-grid update: every time node and every spatial node.
pub(crate) fn update_field(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    flows: &[ScenarioFlow],
    noise: &NoiseWindow,
    terminal: &TerminalData,
) -> Result<DecouplingField> {
    let steps = field.time.steps;
    let space = field.space.clone();
    let d = space.dim;
    let nodes: Vec<Vector> = (0..space.len()).map(|i| space.node(i)).collect();
    let per_time: Vec<(Vec<f64>, Vec<f64>)> = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let mut vals = Vec::with_capacity(nodes.len() * d);
            let mut errs = Vec::with_capacity(nodes.len() * d);
            let mut scratch = Vec::with_capacity(flows.len());
            for x in &nodes {
                scratch.clear();
                for f in flows {
                    scratch.push(characteristic_value(model, beta, field, f, noise, terminal, k, x)?);
                }
                let (mu, se) = mean_and_stderr(&scratch, d, noise.paired());
                vals.extend_from_slice(&mu);
                errs.extend_from_slice(&se);
            }
            Ok((vals, errs))
        })
        .collect::<Result<_>>()?;
    let mut out = DecouplingField::zeros(field.time, space, flows.len());
    for (k, (v, e)) in per_time.into_iter().enumerate() {
        out.slices[k].values = v;
        out.stderr[k].values = e;
    }
    Ok(out)
}
