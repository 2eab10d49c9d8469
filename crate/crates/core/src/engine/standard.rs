//! Quantities read off along the uncontrolled path `X^x = x + βB⁰`: the
//! value, the decoupling field through the value's own characteristic, the
//! cost of a candidate control, and the `Z⁰` reconstruction.

use super::field::{DecouplingField, TerminalData};
use super::forward::{mean_and_stderr, ScenarioFlow};
use super::noise::NoiseWindow;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Vector};
use crate::measure::EmpiricalMeasure;
use crate::model::{legendre_transform, Model};

/// `x + β(B⁰_{t_j} - B⁰_{t₀})` for `j = 0..=steps`, row-major.
pub fn noise_path(beta: f64, noise: &NoiseWindow, scenario: usize, steps: usize, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity((steps + 1) * d);
    out.extend_from_slice(x);
    for j in 0..steps {
        let inc = noise.increment(scenario, j);
        for c in 0..d {
            let prev = out[j * d + c];
            out.push(prev + beta * inc[c]);
        }
    }
    out
}

fn check_steps(field: &DecouplingField, flows: &[ScenarioFlow]) -> Result<()> {
    if flows.is_empty() {
        return Err(Error::invalid("no scenarios"));
    }
    if flows[0].steps() != field.time.steps {
        return Err(Error::invalid("flows and field have different step counts"));
    }
    Ok(())
}

/// `∂ₓV(t₀, x)` from the value's characteristic: the driver carries the
/// transport term `∂ₓₓV ∂ₚH` as well as `∂ₓH`. Mean and standard error.
pub fn standard_system_gradient(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    flows: &[ScenarioFlow],
    noise: &NoiseWindow,
    terminal: &TerminalData,
    x: &[f64],
) -> Result<(Vector, Vector)> {
    check_steps(field, flows)?;
    let s = field.time.steps;
    let dt = field.time.dt;
    let d = x.len();
    let vals: Vec<Vector> = flows
        .iter()
        .map(|f| {
            let path = noise_path(beta, noise, f.scenario, s, x);
            let xs = &path[s * d..];
            let mut acc = terminal.eval(model, xs, f.terminal_measure());
            for j in 0..s {
                let xj = &path[j * d..(j + 1) * d];
                let rho = &f.snapshots[j];
                let p = field.eval(j, xj);
                let hx = model.h_dx(xj, rho, &p);
                let hp = model.h_dp(xj, rho, &p);
                let xn = &path[(j + 1) * d..(j + 2) * d];
                let jac = next_jacobian(model, field, terminal, f, j + 1, xn);
                let tr = jac.mul_vec(&hp);
                for c in 0..d {
                    acc[c] -= (hx[c] + tr[c]) * dt;
                }
            }
            acc
        })
        .collect();
    Ok(mean_and_stderr(&vals, d, noise.paired()))
}

fn next_jacobian(
    model: &dyn Model,
    field: &DecouplingField,
    terminal: &TerminalData,
    flow: &ScenarioFlow,
    k: usize,
    x: &[f64],
) -> Matrix {
    if k < field.time.steps {
        return field.at(k).jacobian(x);
    }
    match terminal {
        TerminalData::Gradient => model.g_dxx(x, flow.terminal_measure()),
        TerminalData::Grid(g) => g.jacobian(x),
    }
}

/// `V(t₀, x)` as the scenario mean of `terminal(X_T, ρ_T) - Σ H(X_j, ρ_j, field) dt`
/// along `x + βB⁰`. Mean and standard error.
pub fn value_along_noise(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    flows: &[ScenarioFlow],
    noise: &NoiseWindow,
    terminal: &mut dyn FnMut(&[f64], &EmpiricalMeasure) -> Result<f64>,
    x: &[f64],
) -> Result<(f64, f64)> {
    check_steps(field, flows)?;
    let s = field.time.steps;
    let dt = field.time.dt;
    let d = x.len();
    let mut vals = Vec::with_capacity(flows.len());
    for f in flows {
        let path = noise_path(beta, noise, f.scenario, s, x);
        let mut acc = terminal(&path[s * d..], f.terminal_measure())?;
        for j in 0..s {
            let xj = &path[j * d..(j + 1) * d];
            let p = field.eval(j, xj);
            acc -= model.hamiltonian(xj, &f.snapshots[j], &p) * dt;
        }
        vals.push(smallvec::smallvec![acc]);
    }
    let (m, se) = mean_and_stderr(&vals, 1, noise.paired());
    Ok((m[0], se[0]))
}

/// Feedback control `α(j, x, ρ_j, ∂ₓV)`.
pub type Control<'a> = dyn Fn(usize, &[f64], &EmpiricalMeasure, &[f64]) -> Vector + Sync + 'a;

/// Expected cost `G(X_T, ρ_T) + Σ L(X_j, ρ_j, α_j) dt` of driving `dX = α dt + βdB⁰`
/// from `x` against the fixed flows, with `L` the Legendre dual of `H`.
#[allow(clippy::too_many_arguments)]
pub fn control_cost(
    model: &dyn Model,
    beta: f64,
    field: &DecouplingField,
    flows: &[ScenarioFlow],
    noise: &NoiseWindow,
    terminal: &mut dyn FnMut(&[f64], &EmpiricalMeasure) -> Result<f64>,
    control: &Control<'_>,
    x: &[f64],
) -> Result<(f64, f64)> {
    check_steps(field, flows)?;
    let s = field.time.steps;
    let dt = field.time.dt;
    let d = x.len();
    let mut vals = Vec::with_capacity(flows.len());
    for f in flows {
        let mut cur: Vector = x.iter().copied().collect();
        let mut acc = 0.0;
        for j in 0..s {
            let rho = &f.snapshots[j];
            let p = field.eval(j, &cur);
            let a = control(j, &cur, rho, &p);
            let (l, _) = legendre_transform(model, &cur, rho, &a)?;
            acc += l * dt;
            let inc = noise.increment(f.scenario, j);
            for c in 0..d {
                cur[c] += a[c] * dt + beta * inc[c];
            }
        }
        acc += terminal(&cur, f.terminal_measure())?;
        vals.push(smallvec::smallvec![acc]);
    }
    let (m, se) = mean_and_stderr(&vals, 1, noise.paired());
    Ok((m[0], se[0]))
}

/// The candidate optimal feedback `α* = -∂ₚH(x, ρ, ∂ₓV)`.
pub fn optimal_control(model: &dyn Model) -> impl Fn(usize, &[f64], &EmpiricalMeasure, &[f64]) -> Vector + Sync + '_ {
    move |_, x, rho, p| model.h_dp(x, rho, p).iter().map(|v| -v).collect()
}

/// Running cost `∂ₚH·p - H` of the optimal feedback, i.e. `L(x, ρ, α*)`.
pub fn optimal_running_cost(model: &dyn Model, x: &[f64], rho: &EmpiricalMeasure, p: &[f64]) -> f64 {
    dot(&model.h_dp(x, rho, p), p) - model.hamiltonian(x, rho, p)
}

/// Fills `flow.z0` with `β(∂ₓₓV(X) + cross(k, X))` per particle, where
/// `cross` supplies the population-averaged measure term (zero when `None`).
pub fn reconstruct_z0(
    beta: f64,
    field: &DecouplingField,
    flow: &mut ScenarioFlow,
    cross: Option<&dyn Fn(usize, &[f64]) -> Matrix>,
) {
    let s = field.time.steps;
    let d = field.dim();
    let n = flow.particles();
    let mut z = vec![0.0; s * n * d * d];
    for k in 0..s {
        for i in 0..n {
            let x = flow.x(k, i);
            let mut m = field.at(k).jacobian(x);
            if let Some(c) = cross {
                m.add_assign(&c(k, x));
            }
            m.scale(beta);
            let o = (k * n + i) * d * d;
            z[o..o + d * d].copy_from_slice(m.as_slice());
        }
    }
    flow.z0 = Some(z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tests::{solve_window, spec};

    #[test]
    fn standard_system_coincides_with_field_at_start() {
        let s = spec("free_flow", 0.25, 0.0);
        let cloud = EmpiricalMeasure::sample_gaussian(1, 64, 0.0, 1.0, 2).unwrap();
        let (sol, noise, time) = solve_window(&s, 0.0, &cloud, 1, 0.01, 1e-10);
        let w = noise.window(0, time.steps).unwrap();
        for x in [-2.0, 0.3, 1.7] {
            let (g, _) = standard_system_gradient(s.maps.as_ref(), 0.0, &sol.field, &sol.flows, &w, &sol.terminal, &[x]).unwrap();
            let f = sol.field.eval(0, &[x])[0];
            assert!((g[0] - f).abs() <= 1e-4, "{} vs {f}", g[0]);
        }
    }

    #[test]
    fn value_slope_matches_field_and_optimal_cost() {
        let s = spec("lq", 0.25, 0.5);
        let model = s.maps.as_ref();
        let cloud = EmpiricalMeasure::sample_gaussian(1, 128, 0.5, 1.0, 2).unwrap();
        let (sol, noise, time) = solve_window(&s, 0.0, &cloud, 16, 0.01, 1e-8);
        let w = noise.window(0, time.steps).unwrap();
        let mut g = |x: &[f64], rho: &EmpiricalMeasure| Ok(model.terminal(x, rho));
        let value = |x: f64, g: &mut dyn FnMut(&[f64], &EmpiricalMeasure) -> Result<f64>| {
            value_along_noise(model, s.beta, &sol.field, &sol.flows, &w, g, &[x]).unwrap().0
        };
        let h = 0.05;
        for x in [-1.0, 0.8] {
            let fd = (value(x + h, &mut g) - value(x - h, &mut g)) / (2.0 * h);
            let f = sol.field.eval(0, &[x])[0];
            assert!(((fd - f) / f).abs() < 0.03, "{fd} vs {f}");
        }
        let x = 0.8;
        let v = value(x, &mut g);
        let star = optimal_control(model);
        let (c, _) = control_cost(model, s.beta, &sol.field, &sol.flows, &w, &mut g, &star, &[x]).unwrap();
        assert!((c - v).abs() <= 2.0 * time.dt, "{c} vs {v}");
        let shifted = |j: usize, x: &[f64], rho: &EmpiricalMeasure, p: &[f64]| -> Vector {
            star(j, x, rho, p).iter().map(|a| a + 0.3).collect()
        };
        let (worse, _) = control_cost(model, s.beta, &sol.field, &sol.flows, &w, &mut g, &shifted, &[x]).unwrap();
        assert!(worse >= v - 2.0 * time.dt, "{worse} vs {v}");
    }

    #[test]
    fn z0_is_beta_times_slope_without_measure_term() {
        let s = spec("free_flow", 0.25, 0.5);
        let cloud = EmpiricalMeasure::sample_gaussian(1, 16, 0.0, 1.0, 2).unwrap();
        let (mut sol, _, _) = solve_window(&s, 0.0, &cloud, 4, 0.01, 1e-8);
        let field = sol.field.clone();
        reconstruct_z0(0.5, &field, &mut sol.flows[0], None);
        let z = sol.flows[0].z0.as_ref().unwrap();
        assert!((z[0] - 0.5 * 0.8).abs() < 0.01, "{}", z[0]);
    }
}
