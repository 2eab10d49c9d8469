//! Global solutions on `[0, T]` by stitching short windows, and evaluation
//! of `V`, `∂ₓV` and `∂_μ∂ₓV` at arbitrary `(t, x, μ)`.

mod estimators;
mod persist;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::engine::{
    picard_solve, simulate_forward, solve_discrete_nabla_mu, solve_linearized_mkv,
    solve_linearized_state, solve_nabla_mu, value_along_noise, BoundaryLink, DecouplingField,
    GridFn, LinearContext, LinearizedParams, NoiseBundle, PicardDiagnostics, PicardParams,
    PicardSolution, ScenarioFlow, SpatialGrid, TerminalData, TerminalSpec, TimeGrid,
    WindowProblem,
};
use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, zeros, Vector};
use crate::measure::{quantize_cube, resample, EmpiricalMeasure};
use crate::model::ModelSpec;

pub use estimators::{
    decoupling_consistency, estimate_measure_lipschitz, estimate_second_diff, BumpFamily,
    ConsistencyReport, LipschitzEstimate, Metric, SecondDiffReport,
};
pub use persist::{
    read_field_csv, read_flow_csv, write_field_csv, write_flow_csv, write_solution_dir, FieldTable,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveParams {
    pub dt: f64,
    /// Particles per cloud; measures with more atoms are resampled.
    pub particles: usize,
    /// Common-noise scenarios (one is used when `β = 0`).
    pub scenarios: usize,
    /// Grid points per axis of the spatial box.
    pub grid_points: usize,
    pub half_width: f64,
    pub picard: PicardParams,
    pub interval_len: f64,
    /// Smallest interval tried by automatic halving.
    pub min_interval_len: f64,
    pub seed: u64,
    pub linearized: LinearizedParams,
    /// Resolution of the cache key quantization.
    pub cache_level: u32,
    /// Draw common-noise scenarios in reflected pairs.
    pub antithetic: bool,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self {
            dt: 0.01,
            particles: 2048,
            scenarios: 64,
            grid_points: 65,
            half_width: 6.0,
            picard: PicardParams::default(),
            interval_len: 0.25,
            min_interval_len: 0.0625,
            seed: 0,
            linearized: LinearizedParams::default(),
            cache_level: 4096,
            antithetic: true,
        }
    }
}

impl SolveParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.particles == 0 || self.scenarios == 0 {
            return bad("particles and scenarios must be at least 1");
        }
        if self.grid_points < 2 || !(self.half_width > 0.0) {
            return bad("grid needs at least 2 points per axis and a positive half width");
        }
        if !(self.interval_len >= self.dt) || !(self.min_interval_len > 0.0) {
            return bad("interval lengths must be at least dt and positive");
        }
        if self.cache_level == 0 {
            return bad("cache_level must be positive");
        }
        Ok(())
    }
}

/// A converged window `[start, end]` (global step indices) solved from `measure`.
#[derive(Clone, Debug)]
pub struct WindowSolution {
    pub start: usize,
    pub end: usize,
    /// The measure the window was requested for (before resampling).
    pub measure: EmpiricalMeasure,
    pub solution: PicardSolution,
    /// Last solve of the following window used for the terminal field.
    pub inner: Option<Arc<WindowSolution>>,
}

impl WindowSolution {
    /// Number of windows in the recursion below and including this one.
    pub fn depth(&self) -> usize {
        1 + self.inner.as_ref().map_or(0, |w| w.depth())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub t0: f64,
    pub t1: f64,
    pub start_step: usize,
    pub end_step: usize,
    pub diagnostics: PicardDiagnostics,
    /// Sup distance between this window's terminal field and the next
    /// window's first slice; zero for the last window.
    pub stitch_residual: f64,
}

type CacheKey = (usize, Vec<u64>);

struct Engine {
    spec: ModelSpec,
    params: SolveParams,
    time: TimeGrid,
    space: Arc<SpatialGrid>,
    noise: NoiseBundle,
    interval_steps: usize,
    cache: Mutex<HashMap<CacheKey, Arc<WindowSolution>>>,
}

impl Engine {
    fn new(spec: &ModelSpec, params: &SolveParams, interval_steps: usize) -> Result<Self> {
        let time = TimeGrid::new(0.0, spec.horizon, params.dt)?;
        if ((spec.horizon / params.dt) - time.steps as f64).abs() > 1e-6 {
            return Err(Error::invalid("the horizon must be a multiple of dt"));
        }
        let space = Arc::new(SpatialGrid::new(spec.dim, params.half_width, params.grid_points)?);
        let noise = if params.antithetic {
            NoiseBundle::antithetic(params.seed, params.scenarios, time.steps, spec.dim, time.dt)?
        } else {
            NoiseBundle::generate(params.seed, params.scenarios, time.steps, spec.dim, time.dt)?
        };
        Ok(Self {
            spec: spec.clone(),
            params: params.clone(),
            time,
            space,
            noise,
            interval_steps,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn total_steps(&self) -> usize {
        self.time.steps
    }

    /// Window ends are aligned backward from the horizon.
    fn end_of(&self, start: usize) -> usize {
        let s = self.total_steps();
        let from_end = s - start;
        let k = (from_end - 1) / self.interval_steps;
        s - k * self.interval_steps
    }

    fn step_of(&self, t: f64) -> Result<usize> {
        let s = t / self.time.dt;
        if !(t >= -1e-12 && t <= self.spec.horizon + 1e-12) {
            return Err(Error::invalid(format!("t = {t} outside [0, {}]", self.spec.horizon)));
        }
        Ok((s.round() as usize).min(self.total_steps()))
    }

    fn prepare(&self, mu: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
        if mu.dim() != self.spec.dim {
            return Err(Error::invalid("measure dimension does not match the model"));
        }
        if mu.len() <= self.params.particles {
            Ok(mu.clone())
        } else {
            resample(mu, self.params.particles, self.params.seed)
        }
    }

    fn solve_window(
        &self,
        start: usize,
        mu: &EmpiricalMeasure,
        tol: f64,
        warm: Option<&WindowSolution>,
    ) -> Result<WindowSolution> {
        let end = self.end_of(start);
        let time = TimeGrid {
            t0: self.time.node(start),
            dt: self.time.dt,
            steps: end - start,
        };
        let cloud = self.prepare(mu)?;
        let prob = WindowProblem {
            model: self.spec.maps.as_ref(),
            beta: self.spec.beta,
            time,
            space: &self.space,
            noise: self.noise.window(start, end - start)?,
            cloud: &cloud,
        };
        let params = PicardParams {
            tol,
            ..self.params.picard.clone()
        };
        let warm_field = warm.map(|w| &w.solution.field);
        if end == self.total_steps() {
            let solution = picard_solve(&prob, &params, &mut TerminalSpec::Gradient, warm_field)?;
            return Ok(WindowSolution {
                start,
                end,
                measure: mu.clone(),
                solution,
                inner: None,
            });
        }
        let mut link = StitchLink {
            engine: self,
            start: end,
            last: warm.and_then(|w| w.inner.clone()),
        };
        let solution = picard_solve(&prob, &params, &mut TerminalSpec::Linked(&mut link), warm_field)?;
        Ok(WindowSolution {
            start,
            end,
            measure: mu.clone(),
            solution,
            inner: link.last,
        })
    }

    /// Cold solve from `(start, μ)`, memoized on the quantized measure.
    fn window(&self, start: usize, mu: &EmpiricalMeasure) -> Result<Arc<WindowSolution>> {
        let key = cache_key(start, mu, self.params.cache_level)?;
        if let Some(w) = self.cache.lock().map_err(poisoned)?.get(&key) {
            if w.measure == *mu {
                return Ok(w.clone());
            }
        }
        let w = Arc::new(self.solve_window(start, mu, self.params.picard.tol, None)?);
        self.cache.lock().map_err(poisoned)?.entry(key).or_insert_with(|| w.clone());
        Ok(w)
    }
}

fn poisoned<T>(_: std::sync::PoisonError<T>) -> Error {
    Error::Internal("window cache lock poisoned".into())
}

fn cache_key(start: usize, mu: &EmpiricalMeasure, level: u32) -> Result<CacheKey> {
    let q = quantize_cube(mu, level)?;
    let mut bits: Vec<u64> = q.points().iter().map(|v| v.to_bits()).collect();
    bits.extend(q.weights().iter().map(|w| w.to_bits()));
    Ok((start, bits))
}

/// Index-wise mean of the terminal particle positions over scenarios.
pub fn boundary_barycenter(flows: &[ScenarioFlow]) -> EmpiricalMeasure {
    let first = flows[0].terminal_measure();
    if flows.len() == 1 {
        return first.clone();
    }
    let m = flows.len() as f64;
    let mut pts = vec![0.0; first.points().len()];
    for f in flows {
        for (p, v) in pts.iter_mut().zip(f.terminal_measure().points()) {
            *p += v / m;
        }
    }
    first
        .with_points(pts)
        .expect("barycenter keeps the atom layout")
}

struct StitchLink<'a> {
    engine: &'a Engine,
    start: usize,
    last: Option<Arc<WindowSolution>>,
}

impl BoundaryLink for StitchLink<'_> {
    fn terminal_field(&mut self, flows: &[ScenarioFlow], tol: f64) -> Result<GridFn> {
        let nu = boundary_barycenter(flows);
        let inner = self.engine.solve_window(self.start, &nu, tol, self.last.as_deref())?;
        let grid = inner.solution.field.at(0).clone();
        self.last = Some(Arc::new(inner));
        Ok(grid)
    }
}

/// A solved master field: the stitched chain from the initial measure plus
/// everything needed to evaluate at other `(t, x, μ)`.
pub struct MasterSolution {
    engine: Engine,
    pub initial: EmpiricalMeasure,
    pub chain: Vec<Arc<WindowSolution>>,
    pub intervals: Vec<IntervalRecord>,
    /// Interval lengths tried before one contracted.
    pub halvings: Vec<f64>,
}

impl std::fmt::Debug for MasterSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MasterSolution")
            .field("model", &self.engine.spec.name)
            .field("horizon", &self.engine.spec.horizon)
            .field("interval_len", &self.interval_len())
            .field("intervals", &self.intervals.len())
            .finish()
    }
}

/// Solves on `[0, T]` from `mu0`, halving the interval length on non-contraction.
pub fn global_solve(spec: &ModelSpec, mu0: &EmpiricalMeasure, params: &SolveParams) -> Result<MasterSolution> {
    params.validate()?;
    spec.check_fields()?;
    let min_steps = ((params.min_interval_len / params.dt).round() as usize).max(1);
    let mut steps = ((params.interval_len / params.dt).round() as usize).max(1);
    let mut halvings = Vec::new();
    loop {
        let engine = Engine::new(spec, params, steps)?;
        match build_chain(&engine, mu0) {
            Ok((chain, intervals)) => {
                return Ok(MasterSolution {
                    engine,
                    initial: mu0.clone(),
                    chain,
                    intervals,
                    halvings,
                })
            }
            Err(e) if e.is_non_contraction() && steps / 2 >= min_steps => {
                halvings.push(steps as f64 * params.dt);
                steps /= 2;
            }
            Err(e) => return Err(e),
        }
    }
}

fn build_chain(engine: &Engine, mu0: &EmpiricalMeasure) -> Result<(Vec<Arc<WindowSolution>>, Vec<IntervalRecord>)> {
    let first = engine.window(0, mu0)?;
    let mut chain = vec![first];
    loop {
        let last = chain.last().unwrap().clone();
        if last.end == engine.total_steps() {
            break;
        }
        let nu = boundary_barycenter(&last.solution.flows);
        let next = engine.solve_window(last.end, &nu, engine.params.picard.tol, last.inner.as_deref())?;
        chain.push(Arc::new(next));
    }
    let intervals = chain
        .iter()
        .enumerate()
        .map(|(i, w)| IntervalRecord {
            t0: engine.time.node(w.start),
            t1: engine.time.node(w.end),
            start_step: w.start,
            end_step: w.end,
            diagnostics: w.solution.diagnostics.clone(),
            stitch_residual: match (&w.solution.terminal, chain.get(i + 1)) {
                (TerminalData::Grid(g), Some(next)) => max_abs_diff(&g.values, &next.solution.field.at(0).values),
                _ => 0.0,
            },
        })
        .collect();
    Ok((chain, intervals))
}

impl MasterSolution {
    pub fn spec(&self) -> &ModelSpec {
        &self.engine.spec
    }

    pub fn params(&self) -> &SolveParams {
        &self.engine.params
    }

    pub fn time(&self) -> TimeGrid {
        self.engine.time
    }

    pub fn space(&self) -> &Arc<SpatialGrid> {
        &self.engine.space
    }

    pub fn noise(&self) -> &NoiseBundle {
        &self.engine.noise
    }

    pub fn interval_len(&self) -> f64 {
        self.engine.interval_steps as f64 * self.engine.time.dt
    }

    /// Largest stitching residual over all interval boundaries.
    pub fn max_stitch_residual(&self) -> f64 {
        self.intervals.iter().map(|r| r.stitch_residual).fold(0.0, f64::max)
    }

    /// Number of cached window solves.
    pub fn cache_len(&self) -> usize {
        self.engine.cache.lock().map(|c| c.len()).unwrap_or(0)
    }

    /// Window starting at the node nearest `t` for the measure `mu`.
    pub fn window(&self, t: f64, mu: &EmpiricalMeasure) -> Result<Arc<WindowSolution>> {
        let s = self.engine.step_of(t)?;
        if s == self.engine.total_steps() {
            return Err(Error::invalid("no window starts at the horizon"));
        }
        if s == 0 && *mu == self.initial {
            return Ok(self.chain[0].clone());
        }
        self.engine.window(s, mu)
    }

    /// `∂ₓV(t, x, μ)` at the time node nearest `t`.
    #[allow(non_snake_case)]
    pub fn eval_dxV(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vector> {
        self.eval_dxV_with_error(t, x, mu).map(|(v, _)| v)
    }

    /// `∂ₓV` and its Monte Carlo standard error.
    #[allow(non_snake_case)]
    pub fn eval_dxV_with_error(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<(Vector, Vector)> {
        self.check_point(x)?;
        if self.engine.step_of(t)? == self.engine.total_steps() {
            return Ok((self.engine.spec.maps.g_dx(x, mu), zeros(x.len())));
        }
        let w = self.window(t, mu)?;
        let f = &w.solution.field;
        // inner windows feed their own sampling error in through the terminal field
        let mut var: Vector = f.stderr[0].eval(x).iter().map(|s| s * s).collect();
        let mut cur = w.inner.as_deref();
        while let Some(inner) = cur {
            for (v, s) in var.iter_mut().zip(inner.solution.field.stderr[0].eval(x)) {
                *v += s * s;
            }
            cur = inner.inner.as_deref();
        }
        Ok((f.eval(0, x), var.iter().map(|v| v.sqrt()).collect()))
    }

    /// `∂ₓV(t, ·, μ)` at the rows of `points` (`n × d`, flattened) from one
    /// window lookup.
    #[allow(non_snake_case)]
    pub fn eval_dxV_many(&self, t: f64, mu: &EmpiricalMeasure, points: &[f64]) -> Result<Vec<f64>> {
        let d = self.engine.spec.dim;
        if points.len() % d != 0 {
            return Err(Error::invalid("point buffer length is not a multiple of the dimension"));
        }
        for x in points.chunks(d) {
            self.check_point(x)?;
        }
        if self.engine.step_of(t)? == self.engine.total_steps() {
            return Ok(points.chunks(d).flat_map(|x| self.engine.spec.maps.g_dx(x, mu)).collect());
        }
        let w = self.window(t, mu)?;
        Ok(points.chunks(d).flat_map(|x| w.solution.field.eval(0, x)).collect())
    }

    /// `V(t, x, μ)` and its standard error, from `G - Σ H dt` along `x + βB⁰`
    /// window by window; the terminal value of an inner window is the value
    /// at the origin plus the line integral of the linked gradient field.
    #[allow(non_snake_case)]
    pub fn eval_V(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<(f64, f64)> {
        self.check_point(x)?;
        let model = self.engine.spec.maps.as_ref();
        if self.engine.step_of(t)? == self.engine.total_steps() {
            return Ok((model.terminal(x, mu), 0.0));
        }
        let w = self.window(t, mu)?;
        let sol = &w.solution;
        let noise = self.engine.noise.window(w.start, w.end - w.start)?;
        match &sol.terminal {
            TerminalData::Gradient => {
                let mut g = |y: &[f64], rho: &EmpiricalMeasure| Ok(model.terminal(y, rho));
                value_along_noise(model, self.engine.spec.beta, &sol.field, &sol.flows, &noise, &mut g, x)
            }
            TerminalData::Grid(grid) => {
                let nu = boundary_barycenter(&sol.flows);
                let origin = zeros(x.len());
                let (v0, _) = self.eval_V(self.engine.time.node(w.end), &origin, &nu)?;
                let mut g = |y: &[f64], _: &EmpiricalMeasure| Ok(v0 + grid.line_integral(&origin, y));
                value_along_noise(model, self.engine.spec.beta, &sol.field, &sol.flows, &noise, &mut g, x)
            }
        }
    }

    /// The solution from `(t, μ)` to the horizon as one window: fields of the
    /// recursive chain concatenated and the particles re-simulated under it.
    pub fn composite(&self, t: f64, mu: &EmpiricalMeasure) -> Result<(PicardSolution, usize)> {
        let w = self.window(t, mu)?;
        let start = w.start;
        let s = self.engine.total_steps();
        let time = TimeGrid {
            t0: self.engine.time.node(start),
            dt: self.engine.time.dt,
            steps: s - start,
        };
        let mut field = DecouplingField::zeros(time, self.engine.space.clone(), w.solution.field.scenarios);
        let mut cur: Option<&WindowSolution> = Some(&w);
        while let Some(win) = cur {
            let f = &win.solution.field;
            for k in 0..=f.time.steps {
                let g = win.start + k - start;
                field.slices[g] = f.slices[k].clone();
                field.stderr[g] = f.stderr[k].clone();
            }
            cur = win.inner.as_deref();
        }
        let cloud = self.engine.prepare(mu)?;
        let noise = self.engine.noise.window(start, s - start)?;
        let flows = simulate_forward(self.engine.spec.maps.as_ref(), self.engine.spec.beta, &field, &cloud, &noise)?;
        Ok((
            PicardSolution {
                field,
                flows,
                terminal: TerminalData::Gradient,
                diagnostics: w.solution.diagnostics.clone(),
            },
            start,
        ))
    }

    /// `∂_{μ_k}∂ₓV(t, x, μ, x̃)` per unit mass.
    #[allow(non_snake_case)]
    pub fn eval_dxmuV(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, x_tilde: &[f64], axis: usize) -> Result<Vector> {
        self.check_point(x)?;
        self.check_point(x_tilde)?;
        let d = self.engine.spec.dim;
        if axis >= d {
            return Err(Error::invalid("axis out of range"));
        }
        if self.engine.step_of(t)? == self.engine.total_steps() {
            let m = self.engine.spec.maps.g_dxmu(x, mu, x_tilde);
            return Ok((0..d).map(|i| m.get(i, axis)).collect());
        }
        let (sol, start) = self.composite(t, mu)?;
        let noise = self.engine.noise.window(start, self.engine.total_steps() - start)?;
        let ctx = LinearContext::new(self.engine.spec.maps.as_ref(), self.engine.spec.beta, &sol, noise)?;
        let lp = &self.engine.params.linearized;
        let tan = solve_linearized_state(&ctx, x_tilde, axis, 1.0, lp)?;
        let resp = solve_linearized_mkv(&ctx, &tan, lp)?;
        solve_nabla_mu(&ctx, &tan, &resp, x, lp)
    }

    /// Same derivative for a measure of at most eight atoms through the
    /// coupled atom system, with atom `atom` moved.
    #[allow(non_snake_case)]
    pub fn eval_dxmuV_discrete(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, atom: usize, axis: usize) -> Result<Vector> {
        self.check_point(x)?;
        if mu.len() > 8 {
            return Err(Error::SizeLimit {
                what: "discrete measure derivative",
                atoms: mu.len(),
                limit: 8,
            });
        }
        let (sol, start) = self.composite(t, mu)?;
        let noise = self.engine.noise.window(start, self.engine.total_steps() - start)?;
        let ctx = LinearContext::new(self.engine.spec.maps.as_ref(), self.engine.spec.beta, &sol, noise)?;
        solve_discrete_nabla_mu(&ctx, atom, axis, x, &self.engine.params.linearized)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.engine.spec.dim {
            return Err(Error::invalid("point dimension does not match the model"));
        }
        if !self.engine.space.in_guard(x) {
            return Err(Error::invalid("point outside the guard box"));
        }
        Ok(())
    }
}
