//! Linear forward-backward systems on a converged window: the spatial
//! tangent along a characteristic, the population response to moving one
//! unit of mass, and the resulting measure derivative `∂_μ∂ₓV`.
//!
//! Every system is affine in the backward unknown (shared across scenarios,
//! as for the field itself) and is solved with GMRES on `(I - L) y = F(0)`.

use serde::{Deserialize, Serialize};

use super::field::TerminalData;
use super::forward::characteristic_path;
use super::noise::NoiseWindow;
use super::picard::PicardSolution;
use crate::error::{Error, Result};
use crate::linalg::{gmres, unit, zeros, Matrix, Vector};
use crate::measure::EmpiricalMeasure;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearizedParams {
    /// Relative residual for GMRES.
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
    /// Particles used for averages over the population.
    pub population: usize,
}

impl Default for LinearizedParams {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 600,
            restart: 60,
            population: 128,
        }
    }
}

/// A converged window together with the noise it was solved on.
#[derive(Clone, Copy)]
pub struct LinearContext<'a> {
    pub model: &'a dyn Model,
    pub beta: f64,
    pub sol: &'a PicardSolution,
    pub noise: NoiseWindow<'a>,
}

impl<'a> LinearContext<'a> {
    pub fn new(model: &'a dyn Model, beta: f64, sol: &'a PicardSolution, noise: NoiseWindow<'a>) -> Result<Self> {
        if !matches!(sol.terminal, TerminalData::Gradient) {
            return Err(Error::invalid(
                "linearized systems need a window that ends at the horizon",
            ));
        }
        Ok(Self {
            model,
            beta,
            sol,
            noise,
        })
    }

    fn steps(&self) -> usize {
        self.sol.field.time.steps
    }

    fn dt(&self) -> f64 {
        self.sol.field.time.dt
    }

    fn dim(&self) -> usize {
        self.sol.field.dim()
    }

    fn scenarios(&self) -> usize {
        self.sol.flows.len()
    }

    fn snap(&self, m: usize, j: usize) -> &EmpiricalMeasure {
        &self.sol.flows[m].snapshots[j]
    }

    /// Characteristic from `x` in every scenario.
    fn paths(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.sol
            .flows
            .iter()
            .map(|f| characteristic_path(self.model, self.beta, &self.sol.field, f, &self.noise, 0, x))
            .collect()
    }
}

/// Second derivatives of `H` along one path, and `∂ₓₓG` at its end.
struct LocalCoeffs {
    xp: Vec<Matrix>,
    pp: Vec<Matrix>,
    xx: Vec<Matrix>,
    gxx: Matrix,
    /// `Y_j` along the path.
    y: Vec<Vector>,
}

fn local_coeffs(ctx: &LinearContext<'_>, m: usize, path: &[f64]) -> LocalCoeffs {
    let d = ctx.dim();
    let s = ctx.steps();
    let mut c = LocalCoeffs {
        xp: Vec::with_capacity(s),
        pp: Vec::with_capacity(s),
        xx: Vec::with_capacity(s),
        gxx: Matrix::zeros(d),
        y: Vec::with_capacity(s + 1),
    };
    for j in 0..=s {
        let x = &path[j * d..(j + 1) * d];
        let y = ctx.sol.field.eval(j, x);
        if j < s {
            let rho = ctx.snap(m, j);
            c.xp.push(ctx.model.h_dxp(x, rho, &y));
            c.pp.push(ctx.model.h_dpp(x, rho, &y));
            c.xx.push(ctx.model.h_dxx(x, rho, &y));
        } else {
            c.gxx = ctx.model.g_dxx(x, ctx.snap(m, s));
        }
        c.y.push(y);
    }
    c
}

fn solve_affine(
    f: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    n: usize,
    params: &LinearizedParams,
    what: &str,
) -> Result<Vec<f64>> {
    let f0 = f(&vec![0.0; n]);
    let mut apply = |v: &[f64]| {
        let fv = f(v);
        v.iter().zip(fv.iter().zip(&f0)).map(|(vi, (a, b))| vi - (a - b)).collect::<Vec<_>>()
    };
    let (x, rel) = gmres(&mut apply, &f0, params.tol, params.restart, params.max_iter);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: what.into() });
    }
    if !(rel <= 10.0 * params.tol) {
        return Err(Error::Singular(format!("{what}: GMRES stopped at relative residual {rel:e}")));
    }
    Ok(x)
}

/// Tangent of the characteristic from `start` in direction `scale·e_axis`,
/// with the field held fixed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TangentState {
    pub start: Vec<f64>,
    pub axis: usize,
    pub scale: f64,
    /// Characteristic from `start`, per scenario, `(steps + 1) × d`.
    pub paths: Vec<Vec<f64>>,
    /// `∇X_j` per scenario.
    pub dx: Vec<Vec<f64>>,
    /// `∇Y_j`, shared across scenarios.
    pub dy: Vec<f64>,
}

impl TangentState {
    pub fn dy_at_start(&self) -> &[f64] {
        &self.dy[..self.start.len()]
    }
}

fn tangent_forward(c: &LocalCoeffs, dy: &[f64], init: &[f64], dt: f64) -> Vec<f64> {
    let d = init.len();
    let s = c.xp.len();
    let mut dx = Vec::with_capacity((s + 1) * d);
    dx.extend_from_slice(init);
    for j in 0..s {
        let cur = &dx[j * d..(j + 1) * d];
        let a = c.xp[j].tr_mul_vec(cur);
        let b = c.pp[j].mul_vec(&dy[j * d..(j + 1) * d]);
        let next: Vector = (0..d).map(|k| cur[k] - (a[k] + b[k]) * dt).collect();
        dx.extend_from_slice(&next);
    }
    dx
}

/// Adds `terminal - Σ_{l>=j} driver_l dt` to `out` for every node `j`, scaled by `w`.
fn accumulate_backward(out: &mut [f64], terminal: &[f64], drivers: &[Vector], dt: f64, w: f64) {
    let d = terminal.len();
    let s = drivers.len();
    let mut acc: Vector = terminal.iter().copied().collect();
    for k in 0..d {
        out[s * d + k] += w * acc[k];
    }
    for j in (0..s).rev() {
        for k in 0..d {
            acc[k] -= drivers[j][k] * dt;
            out[j * d + k] += w * acc[k];
        }
    }
}

/// `∇X, ∇Y` along the characteristic from `start` for the perturbation `scale·e_axis`.
pub fn solve_linearized_state(
    ctx: &LinearContext<'_>,
    start: &[f64],
    axis: usize,
    scale: f64,
    params: &LinearizedParams,
) -> Result<TangentState> {
    let d = ctx.dim();
    if start.len() != d || axis >= d {
        return Err(Error::invalid("start point or axis does not match the dimension"));
    }
    let s = ctx.steps();
    let dt = ctx.dt();
    let paths = ctx.paths(start)?;
    let coeffs: Vec<LocalCoeffs> = paths.iter().enumerate().map(|(m, p)| local_coeffs(ctx, m, p)).collect();
    let mut init = unit(d, axis);
    init.iter_mut().for_each(|v| *v *= scale);
    let wm = 1.0 / coeffs.len() as f64;
    let mut f = |dy: &[f64]| {
        let mut out = vec![0.0; (s + 1) * d];
        for c in &coeffs {
            let dx = tangent_forward(c, dy, &init, dt);
            let drivers: Vec<Vector> = (0..s)
                .map(|j| {
                    let a = c.xx[j].mul_vec(&dx[j * d..(j + 1) * d]);
                    let b = c.xp[j].mul_vec(&dy[j * d..(j + 1) * d]);
                    a.iter().zip(&b).map(|(u, v)| u + v).collect()
                })
                .collect();
            let term = c.gxx.mul_vec(&dx[s * d..]);
            accumulate_backward(&mut out, &term, &drivers, dt, wm);
        }
        out
    };
    let dy = solve_affine(&mut f, (s + 1) * d, params, "tangent system")?;
    let dx = coeffs.iter().map(|c| tangent_forward(c, &dy, &init, dt)).collect();
    Ok(TangentState {
        start: start.to_vec(),
        axis,
        scale,
        paths,
        dx,
        dy,
    })
}

/// Response of the population to one unit of mass at the tangent's start
/// being moved along its axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PopulationResponse {
    pub dim: usize,
    /// Particle indices of the averaging population and their weights.
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
    /// `∇𝒳_{j,i}` per scenario, `(steps + 1) × members × d`.
    pub dx: Vec<Vec<f64>>,
    /// `∇𝒴_{j,i}`, shared across scenarios.
    pub dy: Vec<f64>,
}

impl PopulationResponse {
    pub fn dy_at_start(&self, member: usize) -> &[f64] {
        let d = self.dim;
        &self.dy[member * d..(member + 1) * d]
    }
}

/// Deterministic subsample: every particle when there are few, otherwise an even stride.
fn population(cloud: &EmpiricalMeasure, size: usize) -> (Vec<usize>, Vec<f64>) {
    let n = cloud.len();
    let members: Vec<usize> = if n <= size {
        (0..n).collect()
    } else {
        (0..size).map(|k| k * n / size).collect()
    };
    let total: f64 = members.iter().map(|&i| cloud.weight(i)).sum();
    let weights = members.iter().map(|&i| cloud.weight(i) / total).collect();
    (members, weights)
}

struct Forcing<'a> {
    tangent: &'a TangentState,
}

/// Generic population system: members start from `init` (members × d) and
/// optionally feel the tangent through the cross derivatives.
fn solve_population(
    ctx: &LinearContext<'_>,
    members: &[usize],
    weights: &[f64],
    init: &[f64],
    forcing: Option<Forcing<'_>>,
    params: &LinearizedParams,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = ctx.dim();
    let s = ctx.steps();
    let dt = ctx.dt();
    let n = members.len();
    let mcount = ctx.scenarios();
    let model = ctx.model;
    let row = n * d;
    // local coefficients of each member along its own trajectory
    let coeffs: Vec<Vec<LocalCoeffs>> = (0..mcount)
        .map(|m| {
            members
                .iter()
                .map(|&i| {
                    let path: Vec<f64> = (0..=s).flat_map(|j| ctx.sol.flows[m].x(j, i).to_vec()).collect();
                    local_coeffs(ctx, m, &path)
                })
                .collect()
        })
        .collect();
    let x_of = |m: usize, j: usize, a: usize| ctx.sol.flows[m].x(j, members[a]);
    let tilde = |m: usize, j: usize| -> Option<(&[f64], &[f64])> {
        forcing.as_ref().map(|f| {
            (
                &f.tangent.paths[m][j * d..(j + 1) * d],
                &f.tangent.dx[m][j * d..(j + 1) * d],
            )
        })
    };
    let wm = 1.0 / mcount as f64;
    let forward = |m: usize, dy: &[f64]| -> Vec<f64> {
        let mut dx = vec![0.0; (s + 1) * row];
        dx[..row].copy_from_slice(init);
        for j in 0..s {
            let rho = ctx.snap(m, j);
            for a in 0..n {
                let c = &coeffs[m][a];
                let xa = x_of(m, j, a);
                let cur = &dx[j * row + a * d..j * row + (a + 1) * d];
                let mut drift = c.xp[j].tr_mul_vec(cur);
                let b = c.pp[j].mul_vec(&dy[j * row + a * d..j * row + (a + 1) * d]);
                for k in 0..d {
                    drift[k] += b[k];
                }
                if let Some((xt, gt)) = tilde(m, j) {
                    let v = model.h_dpmu(xa, rho, xt, &c.y[j]).mul_vec(gt);
                    for k in 0..d {
                        drift[k] += v[k];
                    }
                }
                for (b2, &w) in weights.iter().enumerate() {
                    let v = model
                        .h_dpmu(xa, rho, x_of(m, j, b2), &c.y[j])
                        .mul_vec(&dx[j * row + b2 * d..j * row + (b2 + 1) * d]);
                    for k in 0..d {
                        drift[k] += w * v[k];
                    }
                }
                for k in 0..d {
                    dx[(j + 1) * row + a * d + k] = dx[j * row + a * d + k] - drift[k] * dt;
                }
            }
        }
        dx
    };
    let backward_into = |m: usize, dx: &[f64], dy: &[f64], out: &mut [f64]| {
        let rho_s = ctx.snap(m, s);
        for a in 0..n {
            let c = &coeffs[m][a];
            let xa_s = x_of(m, s, a);
            let mut term = c.gxx.mul_vec(&dx[s * row + a * d..s * row + (a + 1) * d]);
            if let Some((xt, gt)) = tilde(m, s) {
                let v = model.g_dxmu(xa_s, rho_s, xt).mul_vec(gt);
                for k in 0..d {
                    term[k] += v[k];
                }
            }
            for (b2, &w) in weights.iter().enumerate() {
                let v = model
                    .g_dxmu(xa_s, rho_s, x_of(m, s, b2))
                    .mul_vec(&dx[s * row + b2 * d..s * row + (b2 + 1) * d]);
                for k in 0..d {
                    term[k] += w * v[k];
                }
            }
            let drivers: Vec<Vector> = (0..s)
                .map(|j| {
                    let rho = ctx.snap(m, j);
                    let xa = x_of(m, j, a);
                    let mut v = c.xx[j].mul_vec(&dx[j * row + a * d..j * row + (a + 1) * d]);
                    let b = c.xp[j].mul_vec(&dy[j * row + a * d..j * row + (a + 1) * d]);
                    for k in 0..d {
                        v[k] += b[k];
                    }
                    if let Some((xt, gt)) = tilde(m, j) {
                        let u = model.h_dxmu(xa, rho, xt, &c.y[j]).mul_vec(gt);
                        for k in 0..d {
                            v[k] += u[k];
                        }
                    }
                    for (b2, &w) in weights.iter().enumerate() {
                        let u = model
                            .h_dxmu(xa, rho, x_of(m, j, b2), &c.y[j])
                            .mul_vec(&dx[j * row + b2 * d..j * row + (b2 + 1) * d]);
                        for k in 0..d {
                            v[k] += w * u[k];
                        }
                    }
                    v
                })
                .collect();
            // scatter this member's column of the backward sum
            let mut col = vec![0.0; (s + 1) * d];
            accumulate_backward(&mut col, &term, &drivers, ctx.dt(), wm);
            for j in 0..=s {
                for k in 0..d {
                    out[j * row + a * d + k] += col[j * d + k];
                }
            }
        }
    };
    let mut f = |dy: &[f64]| {
        let mut out = vec![0.0; (s + 1) * row];
        for m in 0..mcount {
            let dx = forward(m, dy);
            backward_into(m, &dx, dy, &mut out);
        }
        out
    };
    let dy = solve_affine(&mut f, (s + 1) * row, params, "population system")?;
    let dx = (0..mcount).map(|m| forward(m, &dy)).collect();
    Ok((dx, dy))
}

/// Population response `∇𝒳, ∇𝒴` to the tangent's unit mass shift.
pub fn solve_linearized_mkv(
    ctx: &LinearContext<'_>,
    tangent: &TangentState,
    params: &LinearizedParams,
) -> Result<PopulationResponse> {
    let (members, weights) = population(&ctx.sol.flows[0].snapshots[0], params.population);
    let init = vec![0.0; members.len() * ctx.dim()];
    let (dx, dy) = solve_population(ctx, &members, &weights, &init, Some(Forcing { tangent }), params)?;
    Ok(PopulationResponse {
        dim: ctx.dim(),
        members,
        weights,
        dx,
        dy,
    })
}

/// Response of a test particle started at `x` that feels the population
/// (and optionally the tangent) but does not enter the averages. Returns
/// the backward unknown at the first node.
fn solve_test_particle(
    ctx: &LinearContext<'_>,
    x: &[f64],
    members: &[usize],
    weights: &[f64],
    pop_dx: &[Vec<f64>],
    forcing: Option<&TangentState>,
    params: &LinearizedParams,
) -> Result<Vector> {
    let d = ctx.dim();
    let s = ctx.steps();
    let dt = ctx.dt();
    let row = members.len() * d;
    let model = ctx.model;
    let paths = ctx.paths(x)?;
    let coeffs: Vec<LocalCoeffs> = paths.iter().enumerate().map(|(m, p)| local_coeffs(ctx, m, p)).collect();
    let wm = 1.0 / coeffs.len() as f64;
    // the forcing does not depend on the unknown, so precompute it
    let mut fwd_force: Vec<Vec<Vector>> = Vec::with_capacity(coeffs.len());
    let mut bwd_force: Vec<Vec<Vector>> = Vec::with_capacity(coeffs.len());
    let mut term_force: Vec<Vector> = Vec::with_capacity(coeffs.len());
    for (m, c) in coeffs.iter().enumerate() {
        let xt = |j: usize| &paths[m][j * d..(j + 1) * d];
        let mut ff = Vec::with_capacity(s);
        let mut bf = Vec::with_capacity(s);
        for j in 0..s {
            let rho = ctx.snap(m, j);
            let mut fp = zeros(d);
            let mut fx = zeros(d);
            if let Some(t) = forcing {
                let (tx, tg) = (&t.paths[m][j * d..(j + 1) * d], &t.dx[m][j * d..(j + 1) * d]);
                let a = model.h_dpmu(xt(j), rho, tx, &c.y[j]).mul_vec(tg);
                let b = model.h_dxmu(xt(j), rho, tx, &c.y[j]).mul_vec(tg);
                for k in 0..d {
                    fp[k] += a[k];
                    fx[k] += b[k];
                }
            }
            for (b2, &w) in weights.iter().enumerate() {
                let xb = ctx.sol.flows[m].x(j, members[b2]);
                let g = &pop_dx[m][j * row + b2 * d..j * row + (b2 + 1) * d];
                let a = model.h_dpmu(xt(j), rho, xb, &c.y[j]).mul_vec(g);
                let b = model.h_dxmu(xt(j), rho, xb, &c.y[j]).mul_vec(g);
                for k in 0..d {
                    fp[k] += w * a[k];
                    fx[k] += w * b[k];
                }
            }
            ff.push(fp);
            bf.push(fx);
        }
        let rho_s = ctx.snap(m, s);
        let mut tf = zeros(d);
        if let Some(t) = forcing {
            let v = model
                .g_dxmu(xt(s), rho_s, &t.paths[m][s * d..(s + 1) * d])
                .mul_vec(&t.dx[m][s * d..(s + 1) * d]);
            for k in 0..d {
                tf[k] += v[k];
            }
        }
        for (b2, &w) in weights.iter().enumerate() {
            let xb = ctx.sol.flows[m].x(s, members[b2]);
            let v = model
                .g_dxmu(xt(s), rho_s, xb)
                .mul_vec(&pop_dx[m][s * row + b2 * d..s * row + (b2 + 1) * d]);
            for k in 0..d {
                tf[k] += w * v[k];
            }
        }
        fwd_force.push(ff);
        bwd_force.push(bf);
        term_force.push(tf);
    }
    let forward = |m: usize, dy: &[f64]| -> Vec<f64> {
        let c = &coeffs[m];
        let mut dx = vec![0.0; (s + 1) * d];
        for j in 0..s {
            let cur = &dx[j * d..(j + 1) * d];
            let a = c.xp[j].tr_mul_vec(cur);
            let b = c.pp[j].mul_vec(&dy[j * d..(j + 1) * d]);
            let next: Vector = (0..d)
                .map(|k| cur[k] - (a[k] + b[k] + fwd_force[m][j][k]) * dt)
                .collect();
            dx[(j + 1) * d..(j + 2) * d].copy_from_slice(&next);
        }
        dx
    };
    let mut f = |dy: &[f64]| {
        let mut out = vec![0.0; (s + 1) * d];
        for (m, c) in coeffs.iter().enumerate() {
            let dx = forward(m, dy);
            let drivers: Vec<Vector> = (0..s)
                .map(|j| {
                    let a = c.xx[j].mul_vec(&dx[j * d..(j + 1) * d]);
                    let b = c.xp[j].mul_vec(&dy[j * d..(j + 1) * d]);
                    (0..d).map(|k| a[k] + b[k] + bwd_force[m][j][k]).collect()
                })
                .collect();
            let mut term = c.gxx.mul_vec(&dx[s * d..]);
            for k in 0..d {
                term[k] += term_force[m][k];
            }
            accumulate_backward(&mut out, &term, &drivers, dt, wm);
        }
        out
    };
    let dy = solve_affine(&mut f, (s + 1) * d, params, "test particle system")?;
    Ok(dy[..d].iter().copied().collect())
}

/// `∂_{μ_k}∂ₓV(t₀, x, μ, x̃)` per unit mass: the response at `x` of a test
/// particle to the unit mass at `x̃` moving along `e_k`.
pub fn solve_nabla_mu(
    ctx: &LinearContext<'_>,
    tangent: &TangentState,
    response: &PopulationResponse,
    x: &[f64],
    params: &LinearizedParams,
) -> Result<Vector> {
    if tangent.scale != 1.0 {
        return Err(Error::invalid("measure derivative needs a unit tangent"));
    }
    solve_test_particle(
        ctx,
        x,
        &response.members,
        &response.weights,
        &response.dx,
        Some(tangent),
        params,
    )
}

/// Same derivative for a discrete measure whose atoms are the window's
/// particles: atom `atom` (mass `p_i`) is moved along `e_axis`, the coupled
/// atom system is solved exactly and the test particle's response at `x` is
/// divided by `p_i`.
pub fn solve_discrete_nabla_mu(
    ctx: &LinearContext<'_>,
    atom: usize,
    axis: usize,
    x: &[f64],
    params: &LinearizedParams,
) -> Result<Vector> {
    let cloud = &ctx.sol.flows[0].snapshots[0];
    let n = cloud.len();
    let d = ctx.dim();
    if n > 8 {
        return Err(Error::SizeLimit {
            what: "discrete measure derivative",
            atoms: n,
            limit: 8,
        });
    }
    if atom >= n || axis >= d || x.len() != d {
        return Err(Error::invalid("atom, axis or point out of range"));
    }
    let members: Vec<usize> = (0..n).collect();
    let weights = cloud.weights().to_vec();
    let mut init = vec![0.0; n * d];
    init[atom * d + axis] = 1.0;
    let (dx, _) = solve_population(ctx, &members, &weights, &init, None, params)?;
    let out = solve_test_particle(ctx, x, &members, &weights, &dx, None, params)?;
    let p = cloud.weight(atom);
    Ok(out.iter().map(|v| v / p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tests::{solve_window, spec};
    use crate::oracle_lq::{riccati_solve, LqParams};

    fn ctx<'a>(
        s: &'a crate::model::ModelSpec,
        sol: &'a PicardSolution,
        noise: &'a super::super::NoiseBundle,
    ) -> LinearContext<'a> {
        let w = noise.window(0, sol.field.time.steps).unwrap();
        LinearContext::new(s.maps.as_ref(), s.beta, sol, w).unwrap()
    }

    fn lq_q0(horizon: f64) -> f64 {
        let p = LqParams { horizon, ..Default::default() };
        let sol = riccati_solve(&p, &[0.0, horizon]).unwrap();
        sol.q[0]
    }

    #[test]
    fn free_flow_tangent_matches_riccati_and_field_slope() {
        let s = spec("free_flow", 0.25, 0.0);
        let cloud = EmpiricalMeasure::sample_gaussian(1, 64, 0.0, 1.0, 3).unwrap();
        let (sol, noise, _) = solve_window(&s, 0.0, &cloud, 1, 0.01, 1e-10);
        let c = ctx(&s, &sol, &noise);
        let tan = solve_linearized_state(&c, &[0.7], 0, 1.0, &LinearizedParams::default()).unwrap();
        let dy = tan.dy_at_start()[0];
        assert!((dy - 0.8).abs() < 0.02, "{dy}");
        let h = 0.05;
        let fd = (sol.field.eval(0, &[0.7 + h])[0] - sol.field.eval(0, &[0.7 - h])[0]) / (2.0 * h);
        assert!(((dy - fd) / fd).abs() < 0.03, "{dy} vs {fd}");
    }

    #[test]
    fn tangent_is_linear_in_the_perturbation() {
        let s = spec("lq", 0.25, 0.0);
        let cloud = EmpiricalMeasure::sample_gaussian(1, 32, 0.3, 1.0, 3).unwrap();
        let (sol, noise, _) = solve_window(&s, 0.0, &cloud, 1, 0.01, 1e-10);
        let c = ctx(&s, &sol, &noise);
        let p = LinearizedParams::default();
        let one = solve_linearized_state(&c, &[0.2], 0, 1.0, &p).unwrap();
        let two = solve_linearized_state(&c, &[0.2], 0, 2.0, &p).unwrap();
        for (a, b) in one.dy.iter().zip(&two.dy) {
            assert!((2.0 * a - b).abs() < 1e-8);
        }
        for (a, b) in one.dx[0].iter().zip(&two.dx[0]) {
            assert!((2.0 * a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_measure_coupling_gives_zero_derivative() {
        let s = spec("free_flow", 0.25, 0.0);
        let cloud = EmpiricalMeasure::sample_gaussian(1, 16, 0.0, 1.0, 3).unwrap();
        let (sol, noise, _) = solve_window(&s, 0.0, &cloud, 1, 0.01, 1e-10);
        let c = ctx(&s, &sol, &noise);
        let p = LinearizedParams::default();
        let tan = solve_linearized_state(&c, &[0.5], 0, 1.0, &p).unwrap();
        let resp = solve_linearized_mkv(&c, &tan, &p).unwrap();
        assert!(resp.dy.iter().all(|v| v.abs() < 1e-14));
        let out = solve_nabla_mu(&c, &tan, &resp, &[0.1], &p).unwrap();
        assert!(out[0].abs() < 1e-14);
        let disc = solve_discrete_nabla_mu(&c, 0, 0, &[0.1], &p);
        assert!(matches!(disc, Err(Error::SizeLimit { .. })));
    }

    #[test]
    fn lq_measure_derivative_matches_riccati_q() {
        let s = spec("lq", 0.25, 0.0);
        let cloud = EmpiricalMeasure::sample_gaussian(1, 256, 0.5, 1.0, 3).unwrap();
        let (sol, noise, _) = solve_window(&s, 0.0, &cloud, 1, 0.01, 1e-10);
        let c = ctx(&s, &sol, &noise);
        let p = LinearizedParams::default();
        let tan = solve_linearized_state(&c, &[0.4], 0, 1.0, &p).unwrap();
        let resp = solve_linearized_mkv(&c, &tan, &p).unwrap();
        let q = lq_q0(0.25);
        for x in [-1.0, 0.0, 1.5] {
            let out = solve_nabla_mu(&c, &tan, &resp, &[x], &p).unwrap()[0];
            assert!(((out - q) / q).abs() < 0.05, "{out} vs {q}");
        }
    }

    #[test]
    fn discrete_atoms_agree_with_test_particle_form() {
        let s = spec("lq", 0.25, 0.0);
        let atoms = EmpiricalMeasure::new(1, vec![-0.5, 0.3, 1.2], vec![0.2, 0.5, 0.3]).unwrap();
        let (sol, noise, _) = solve_window(&s, 0.0, &atoms, 1, 0.01, 1e-10);
        let c = ctx(&s, &sol, &noise);
        let p = LinearizedParams { tol: 1e-12, ..Default::default() };
        for i in 0..3 {
            let xi = atoms.point(i).to_vec();
            let tan = solve_linearized_state(&c, &xi, 0, 1.0, &p).unwrap();
            let resp = solve_linearized_mkv(&c, &tan, &p).unwrap();
            for x in [0.0, 0.8] {
                let a = solve_nabla_mu(&c, &tan, &resp, &[x], &p).unwrap()[0];
                let b = solve_discrete_nabla_mu(&c, i, 0, &[x], &p).unwrap()[0];
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "atom {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_atom_reduction_and_common_noise() {
        let s = spec("lq", 0.25, 0.5);
        let atom = EmpiricalMeasure::dirac(&[0.4]);
        let (sol, noise, _) = solve_window(&s, 0.0, &atom, 8, 0.01, 1e-9);
        let c = ctx(&s, &sol, &noise);
        let p = LinearizedParams { tol: 1e-12, ..Default::default() };
        let tan = solve_linearized_state(&c, &[0.4], 0, 1.0, &p).unwrap();
        let resp = solve_linearized_mkv(&c, &tan, &p).unwrap();
        let a = solve_nabla_mu(&c, &tan, &resp, &[-0.3], &p).unwrap()[0];
        let b = solve_discrete_nabla_mu(&c, 0, 0, &[-0.3], &p).unwrap()[0];
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        // the LQ gradient does not see β
        let q = lq_q0(0.25);
        assert!(((a - q) / q).abs() < 0.05, "{a} vs {q}");
    }

    #[test]
    fn measure_bump_difference_matches_discrete_derivative() {
        // the drift couples to the mean here, so every cross term is active
        let s = spec("second_order_gap", 0.25, 0.0);
        let atoms = EmpiricalMeasure::new(1, vec![-0.5, 0.3, 1.2], vec![0.2, 0.5, 0.3]).unwrap();
        let (sol, noise, _) = solve_window(&s, 0.0, &atoms, 1, 0.01, 1e-12);
        let c = ctx(&s, &sol, &noise);
        let p = LinearizedParams { tol: 1e-12, ..Default::default() };
        let (i, h, x) = (1, 1e-3, [0.4]);
        let bumped = |sign: f64| {
            let moved = atoms.with_atom(i, &[atoms.point(i)[0] + sign * h]);
            solve_window(&s, 0.0, &moved, 1, 0.01, 1e-12).0.field.eval(0, &x)[0]
        };
        let fd = (bumped(1.0) - bumped(-1.0)) / (2.0 * h * atoms.weight(i));
        let disc = solve_discrete_nabla_mu(&c, i, 0, &x, &p).unwrap()[0];
        let tan = solve_linearized_state(&c, atoms.point(i), 0, 1.0, &p).unwrap();
        let resp = solve_linearized_mkv(&c, &tan, &p).unwrap();
        let cont = solve_nabla_mu(&c, &tan, &resp, &x, &p).unwrap()[0];
        assert!((disc - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{disc} vs {fd}");
        assert!((cont - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{cont} vs {fd}");
    }
}
