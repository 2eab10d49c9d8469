//! C ABI over `mfg-core`.
//!
//! Objects are opaque handles created by `mfg_*_new`/`mfg_solve` and released
//! by the matching `mfg_*_free`. Every fallible call returns an [`MfgStatus`];
//! the message of the last failure on the calling thread is available from
//! [`mfg_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mfg_core::error::Error;
use mfg_core::master::{global_solve, MasterSolution, SolveParams};
use mfg_core::measure::EmpiricalMeasure;
use mfg_core::model::{bundled_spec, BundledParams, ModelSpec};
use mfg_core::oracle_lq::{riccati_on_uniform_grid, LqParams};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NonContraction = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

pub struct MfgModel(ModelSpec);
pub struct MfgMeasure(EmpiricalMeasure);
pub struct MfgSolution(MasterSolution);

/// Solver parameters; start from [`mfg_solve_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MfgSolveParams {
    pub dt: f64,
    pub particles: usize,
    pub scenarios: usize,
    pub grid_points: usize,
    pub half_width: f64,
    pub interval_len: f64,
    pub min_interval_len: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub seed: u64,
}

impl From<MfgSolveParams> for SolveParams {
    fn from(p: MfgSolveParams) -> Self {
        let mut s = SolveParams {
            dt: p.dt,
            particles: p.particles,
            scenarios: p.scenarios,
            grid_points: p.grid_points,
            half_width: p.half_width,
            interval_len: p.interval_len,
            min_interval_len: p.min_interval_len,
            seed: p.seed,
            ..Default::default()
        };
        s.picard.tol = p.picard_tol;
        s.picard.max_iter = p.picard_max_iter;
        s
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MfgStatus {
    match e {
        _ if e.is_non_contraction() => MfgStatus::NonContraction,
        Error::NonFinite { .. } | Error::Singular(_) | Error::LegendreNoConvergence { .. } => MfgStatus::Numerical,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => MfgStatus::Io,
        _ => MfgStatus::InvalidInput,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfgStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MfgStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside the solver".into());
            MfgStatus::Panic
        }
    }
}

unsafe fn by_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn store<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the last error message (NUL-terminated, truncated to `cap`) into
/// `buf` and returns its full length in bytes without the terminator.
#[no_mangle]
pub unsafe extern "C" fn mfg_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a registered model (`free_flow`, `lq`, `lse`, `anti_monotone`,
/// `flipped_lq`, `second_order_gap`).
#[no_mangle]
pub unsafe extern "C" fn mfg_model_new(
    name: *const c_char,
    dim: usize,
    horizon: f64,
    beta: f64,
    a: f64,
    b: f64,
    q: f64,
    out: *mut *mut MfgModel,
) -> MfgStatus {
    guard(|| {
        if name.is_null() {
            return Err(Fail::Null("name"));
        }
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| Error::invalid("model name is not UTF-8"))?;
        let p = BundledParams {
            dim,
            horizon,
            beta,
            a,
            b,
            q,
        };
        store(out, MfgModel(bundled_spec(name, &p)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mfg_model_free(model: *mut MfgModel) {
    release(model)
}

#[no_mangle]
pub unsafe extern "C" fn mfg_model_dim(model: *const MfgModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim)
}

/// `n` atoms of dimension `dim` (`points` is `n × dim`, row-major); `weights`
/// may be null for equal weights.
#[no_mangle]
pub unsafe extern "C" fn mfg_measure_new(
    dim: usize,
    n: usize,
    points: *const f64,
    weights: *const f64,
    out: *mut *mut MfgMeasure,
) -> MfgStatus {
    guard(|| {
        let pts = input(points, n * dim, "points")?.to_vec();
        let mu = if weights.is_null() {
            EmpiricalMeasure::uniform(dim, pts)?
        } else {
            EmpiricalMeasure::new(dim, pts, input(weights, n, "weights")?.to_vec())?
        };
        store(out, MfgMeasure(mu))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mfg_measure_gaussian(
    dim: usize,
    n: usize,
    mean: f64,
    std: f64,
    seed: u64,
    out: *mut *mut MfgMeasure,
) -> MfgStatus {
    guard(|| store(out, MfgMeasure(EmpiricalMeasure::sample_gaussian(dim, n, mean, std, seed)?)))
}

#[no_mangle]
pub unsafe extern "C" fn mfg_measure_free(mu: *mut MfgMeasure) {
    release(mu)
}

#[no_mangle]
pub unsafe extern "C" fn mfg_measure_len(mu: *const MfgMeasure) -> usize {
    mu.as_ref().map_or(0, |m| m.0.len())
}

#[no_mangle]
pub extern "C" fn mfg_solve_params_default() -> MfgSolveParams {
    let s = SolveParams::default();
    MfgSolveParams {
        dt: s.dt,
        particles: s.particles,
        scenarios: s.scenarios,
        grid_points: s.grid_points,
        half_width: s.half_width,
        interval_len: s.interval_len,
        min_interval_len: s.min_interval_len,
        picard_tol: s.picard.tol,
        picard_max_iter: s.picard.max_iter,
        seed: s.seed,
    }
}

/// Solves on `[0, T]` from `mu0`; `params` may be null for the defaults.
#[no_mangle]
pub unsafe extern "C" fn mfg_solve(
    model: *const MfgModel,
    mu0: *const MfgMeasure,
    params: *const MfgSolveParams,
    out: *mut *mut MfgSolution,
) -> MfgStatus {
    guard(|| {
        let model = by_ref(model, "model")?;
        let mu0 = by_ref(mu0, "mu0")?;
        let p = params.as_ref().copied().unwrap_or_else(|| mfg_solve_params_default());
        store(out, MfgSolution(global_solve(&model.0, &mu0.0, &p.into())?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mfg_solution_free(sol: *mut MfgSolution) {
    release(sol)
}

#[no_mangle]
pub unsafe extern "C" fn mfg_solution_intervals(sol: *const MfgSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.0.intervals.len())
}

/// Bounds, Picard iterations and largest contraction ratio after the second
/// iteration (negative when there is none) of interval `j`.
#[no_mangle]
pub unsafe extern "C" fn mfg_solution_interval(
    sol: *const MfgSolution,
    j: usize,
    t0: *mut f64,
    t1: *mut f64,
    iterations: *mut usize,
    max_ratio: *mut f64,
) -> MfgStatus {
    guard(|| {
        let s = by_ref(sol, "solution")?;
        let r = s
            .0
            .intervals
            .get(j)
            .ok_or_else(|| Error::invalid(format!("interval {j} out of range")))?;
        if t0.is_null() || t1.is_null() || iterations.is_null() || max_ratio.is_null() {
            return Err(Fail::Null("interval outputs"));
        }
        *t0 = r.t0;
        *t1 = r.t1;
        *iterations = r.diagnostics.iterations;
        *max_ratio = r.diagnostics.max_ratio_after(2).unwrap_or(-1.0);
        Ok(())
    })
}

/// `∂ₓV(t, x, μ)` into `out[0..dim]`.
#[no_mangle]
pub unsafe extern "C" fn mfg_eval_dxv(
    sol: *const MfgSolution,
    t: f64,
    x: *const f64,
    mu: *const MfgMeasure,
    out: *mut f64,
) -> MfgStatus {
    guard(|| {
        let s = by_ref(sol, "solution")?;
        let d = s.0.spec().dim;
        let v = s.0.eval_dxV(t, input(x, d, "x")?, &by_ref(mu, "mu")?.0)?;
        output(out, d, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// `V(t, x, μ)` and its Monte Carlo standard error.
#[no_mangle]
pub unsafe extern "C" fn mfg_eval_v(
    sol: *const MfgSolution,
    t: f64,
    x: *const f64,
    mu: *const MfgMeasure,
    value: *mut f64,
    stderr: *mut f64,
) -> MfgStatus {
    guard(|| {
        let s = by_ref(sol, "solution")?;
        let d = s.0.spec().dim;
        let (v, e) = s.0.eval_V(t, input(x, d, "x")?, &by_ref(mu, "mu")?.0)?;
        output(value, 1, "value")?[0] = v;
        if !stderr.is_null() {
            *stderr = e;
        }
        Ok(())
    })
}

/// Column `axis` of `∂_μ∂ₓV(t, x, μ, x̃)` into `out[0..dim]`.
#[no_mangle]
pub unsafe extern "C" fn mfg_eval_dxmuv(
    sol: *const MfgSolution,
    t: f64,
    x: *const f64,
    mu: *const MfgMeasure,
    x_tilde: *const f64,
    axis: usize,
    out: *mut f64,
) -> MfgStatus {
    guard(|| {
        let s = by_ref(sol, "solution")?;
        let d = s.0.spec().dim;
        let v = s.0.eval_dxmuV(t, input(x, d, "x")?, &by_ref(mu, "mu")?.0, input(x_tilde, d, "x_tilde")?, axis)?;
        output(out, d, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Riccati coefficients `P(t), Q(t)` of the linear-quadratic family, for
/// which `∂ₓV(t, x, μ) = P(t) x + Q(t) mean(μ)`.
#[no_mangle]
pub unsafe extern "C" fn mfg_lq_riccati(
    a: f64,
    b: f64,
    q: f64,
    horizon: f64,
    t: f64,
    p_out: *mut f64,
    q_out: *mut f64,
) -> MfgStatus {
    guard(|| {
        let params = LqParams {
            a,
            b,
            q,
            horizon,
            ..Default::default()
        };
        params.validate()?;
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::invalid(format!("t = {t} outside [0, {horizon}]")).into());
        }
        if p_out.is_null() || q_out.is_null() {
            return Err(Fail::Null("outputs"));
        }
        let (p, qq) = riccati_on_uniform_grid(&params, 1e-3)?.at(t)?;
        *p_out = p;
        *q_out = qq;
        Ok(())
    })
}

/// NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn mfg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
