//! Closed-form reference for the linear-quadratic family
//! `H = ½|p|² - q⟨x, m⟩`, `G = ½a|x|² + b⟨x, m⟩` with `m` the mean of `μ`.
//!
//! The decoupling field is `∂ₓV(t, x, μ) = P(t) x + Q(t) m` where
//!
//! ```text
//! P' = P²,              P(T) = a
//! Q' = 2PQ + Q² - q,    Q(T) = b
//! ```
//!
//! and the mean of the optimally controlled population satisfies
//! `dm = -(P + Q) m dt + β dB⁰`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::linalg::Vector;
use crate::measure::EmpiricalMeasure;
use crate::model::{bundled_spec, BundledParams, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub horizon: f64,
    pub beta: f64,
    pub dim: usize,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.5,
            q: 0.5,
            horizon: 1.0,
            beta: 0.0,
            dim: 1,
        }
    }
}

impl LqParams {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("a", self.a), ("b", self.b), ("q", self.q)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("LQ parameter {n} = {v} must be >= 0")));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || !(self.beta >= 0.0) || self.dim == 0 {
            return Err(Error::invalid("LQ needs horizon > 0, beta >= 0, dim >= 1"));
        }
        Ok(())
    }
}

pub fn build_lq_model(p: &LqParams) -> Result<ModelSpec> {
    p.validate()?;
    bundled_spec(
        "lq",
        &BundledParams {
            dim: p.dim,
            horizon: p.horizon,
            beta: p.beta,
            a: p.a,
            b: p.b,
            q: p.q,
        },
    )
}

/// `P` and `Q` on a time grid, with cubic Hermite interpolation in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub params: LqParams,
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

fn rhs(params: &LqParams, p: f64, q: f64) -> (f64, f64) {
    (p * p, 2.0 * p * q + q * q - params.q)
}

const BLOWUP: f64 = 1e12;

/// Integrates backward from the horizon with RK4 at a quarter of each grid step.
pub fn riccati_solve(params: &LqParams, times: &[f64]) -> Result<RiccatiSolution> {
    params.validate()?;
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("Riccati grid must be increasing with >= 2 nodes"));
    }
    if (times[times.len() - 1] - params.horizon).abs() > 1e-12 * params.horizon.max(1.0) {
        return Err(Error::invalid("Riccati grid must end at the horizon"));
    }
    let n = times.len();
    let mut ps = vec![0.0; n];
    let mut qs = vec![0.0; n];
    ps[n - 1] = params.a;
    qs[n - 1] = params.b;
    for k in (0..n - 1).rev() {
        let (mut p, mut q) = (ps[k + 1], qs[k + 1]);
        let h = -(times[k + 1] - times[k]) / 4.0;
        for _ in 0..4 {
            let (k1p, k1q) = rhs(params, p, q);
            let (k2p, k2q) = rhs(params, p + 0.5 * h * k1p, q + 0.5 * h * k1q);
            let (k3p, k3q) = rhs(params, p + 0.5 * h * k2p, q + 0.5 * h * k2q);
            let (k4p, k4q) = rhs(params, p + h * k3p, q + h * k3q);
            p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            q += h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
        }
        if !(p.abs() < BLOWUP && q.abs() < BLOWUP) {
            return Err(Error::NonFinite {
                what: format!("Riccati solution blows up before t = {}", times[k + 1]),
            });
        }
        ps[k] = p;
        qs[k] = q;
    }
    Ok(RiccatiSolution {
        params: params.clone(),
        times: times.to_vec(),
        p: ps,
        q: qs,
    })
}

/// Uniform grid with step close to `dt` ending at the horizon.
pub fn riccati_on_uniform_grid(params: &LqParams, dt: f64) -> Result<RiccatiSolution> {
    let steps = (params.horizon / dt).round().max(1.0) as usize;
    let times: Vec<f64> = (0..=steps)
        .map(|k| params.horizon * k as f64 / steps as f64)
        .collect();
    riccati_solve(params, &times)
}

impl RiccatiSolution {
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (t0, t1) = (self.times[0], self.times[self.times.len() - 1]);
        if !(t >= t0 - 1e-12 && t <= t1 + 1e-12) {
            return Err(Error::invalid(format!("t = {t} outside [{t0}, {t1}]")));
        }
        let k = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1) - 1;
        Ok((k, t.clamp(t0, t1)))
    }

    /// `(P(t), Q(t))`.
    pub fn at(&self, t: f64) -> Result<(f64, f64)> {
        let (k, t) = self.locate(t)?;
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        let h = tb - ta;
        let s = (t - ta) / h;
        let (dpa, dqa) = rhs(&self.params, self.p[k], self.q[k]);
        let (dpb, dqb) = rhs(&self.params, self.p[k + 1], self.q[k + 1]);
        let herm = |ya: f64, yb: f64, da: f64, db: f64| {
            let s2 = s * s;
            let s3 = s2 * s;
            (2.0 * s3 - 3.0 * s2 + 1.0) * ya
                + (s3 - 2.0 * s2 + s) * h * da
                + (-2.0 * s3 + 3.0 * s2) * yb
                + (s3 - s2) * h * db
        };
        Ok((
            herm(self.p[k], self.p[k + 1], dpa, dpb),
            herm(self.q[k], self.q[k + 1], dqa, dqb),
        ))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,P,Q")?;
        for k in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{}",
                fmt_f64(self.times[k]),
                fmt_f64(self.p[k]),
                fmt_f64(self.q[k])
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed-form `∂ₓV(t, x, μ) = P(t) x + Q(t) m`.
#[allow(non_snake_case)]
pub fn lq_dxV(sol: &RiccatiSolution, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vector> {
    if x.len() != mu.dim() {
        return Err(Error::invalid("state and measure dimensions differ"));
    }
    let (p, q) = sol.at(t)?;
    Ok(x.iter().zip(mu.mean()).map(|(xi, mi)| p * xi + q * mi).collect())
}

/// Exact `P(t) = a / (1 + a (T - t))`.
pub fn riccati_p_exact(a: f64, horizon: f64, t: f64) -> f64 {
    a / (1.0 + a * (horizon - t))
}

/// First time below the horizon at which `P` blows up, if any (only for `a < 0`).
pub fn riccati_blowup_time(a: f64, horizon: f64) -> Option<f64> {
    (a < 0.0).then(|| horizon + 1.0 / a)
}
