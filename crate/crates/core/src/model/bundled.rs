use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConstants, ModelSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Vector};
use crate::measure::EmpiricalMeasure;

/// Radius of the probe box on which the floors of unbounded families are computed.
pub(crate) const PROBE_RADIUS: f64 = 5.0;

/// Quadratic Hamiltonians with mean-field coupling and an optional smooth
/// concave perturbation in `x`:
///
/// ```text
/// H(x, μ, p) = ½|p|² + c ⟨p, m⟩ - ½k|x|² - q ⟨x, m⟩ - κ lse(x)
/// G(x, μ)    = ½a|x|² + b ⟨x, m⟩
/// ```
///
/// where `m` is the mean of `μ` and `lse(x) = log Σᵢ 2 cosh xᵢ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFamily {
    pub name: String,
    pub dim: usize,
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub c: f64,
    pub k: f64,
    pub kappa: f64,
}

impl QuadraticFamily {
    pub fn free_flow(dim: usize, a: f64) -> Self {
        Self {
            name: "free_flow".into(),
            dim,
            a,
            b: 0.0,
            q: 0.0,
            c: 0.0,
            k: 0.0,
            kappa: 0.0,
        }
    }

    pub fn linear_quadratic(dim: usize, a: f64, b: f64, q: f64) -> Self {
        Self {
            name: "lq".into(),
            a,
            b,
            q,
            ..Self::free_flow(dim, a)
        }
    }

    /// Constant bounds for this family; the floors are valid on the probe box.
    pub fn constants(&self) -> ModelConstants {
        let d = self.dim as f64;
        let r2 = PROBE_RADIUS * PROBE_RADIUS * d;
        let l_h = 1f64
            .max(self.q.abs())
            .max(self.c.abs())
            .max(self.k.abs() + self.kappa.abs());
        let l_g = self.a.abs().max(self.b.abs()).max(1e-3);
        let mut c = ModelConstants::new(l_h, l_g, 1.0);
        c.coercivity_floor = l_h.max((self.q.abs() + 0.5 * self.k.abs()) * r2 + 1.0);
        c.terminal_floor = l_g.max((0.5 * self.a.abs() + self.b.abs()) * r2 + 1.0);
        c
    }

    fn lse(&self, x: &[f64]) -> (f64, Vector, Matrix) {
        let d = x.len();
        let m = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let ch: Vector = x.iter().map(|&v| (v - m).exp() + (-v - m).exp()).collect();
        let sh: Vector = x.iter().map(|&v| (v - m).exp() - (-v - m).exp()).collect();
        let s: f64 = ch.iter().sum();
        let val = m + s.ln();
        let grad: Vector = sh.iter().map(|v| v / s).collect();
        let hess = Matrix::from_fn(d, |i, j| {
            let diag = if i == j { ch[i] / s } else { 0.0 };
            diag - grad[i] * grad[j]
        });
        (val, grad, hess)
    }
}

impl Model for QuadraticFamily {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn hamiltonian(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> f64 {
        let m = mu.mean();
        let mut h = 0.5 * dot(p, p) + self.c * dot(p, m) - 0.5 * self.k * dot(x, x) - self.q * dot(x, m);
        if self.kappa != 0.0 {
            h -= self.kappa * self.lse(x).0;
        }
        h
    }

    fn h_dx(&self, x: &[f64], mu: &EmpiricalMeasure, _p: &[f64]) -> Vector {
        let m = mu.mean();
        let mut g: Vector = x.iter().zip(m).map(|(xi, mi)| -self.k * xi - self.q * mi).collect();
        if self.kappa != 0.0 {
            let (_, lg, _) = self.lse(x);
            for (gi, li) in g.iter_mut().zip(&lg) {
                *gi -= self.kappa * li;
            }
        }
        g
    }

    fn h_dp(&self, _x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Vector {
        p.iter().zip(mu.mean()).map(|(pi, mi)| pi + self.c * mi).collect()
    }

    fn h_dxx(&self, x: &[f64], _mu: &EmpiricalMeasure, _p: &[f64]) -> Matrix {
        let mut h = Matrix::scaled_identity(self.dim, -self.k);
        if self.kappa != 0.0 {
            let (_, _, mut lh) = self.lse(x);
            lh.scale(-self.kappa);
            h.add_assign(&lh);
        }
        h
    }

    fn h_dxp(&self, _x: &[f64], _mu: &EmpiricalMeasure, _p: &[f64]) -> Matrix {
        Matrix::zeros(self.dim)
    }

    fn h_dpp(&self, _x: &[f64], _mu: &EmpiricalMeasure, _p: &[f64]) -> Matrix {
        Matrix::identity(self.dim)
    }

    fn h_dxmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _y: &[f64], _p: &[f64]) -> Matrix {
        Matrix::scaled_identity(self.dim, -self.q)
    }

    fn h_dpmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _y: &[f64], _p: &[f64]) -> Matrix {
        Matrix::scaled_identity(self.dim, self.c)
    }

    fn terminal(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        0.5 * self.a * dot(x, x) + self.b * dot(x, mu.mean())
    }

    fn g_dx(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vector {
        x.iter().zip(mu.mean()).map(|(xi, mi)| self.a * xi + self.b * mi).collect()
    }

    fn g_dxx(&self, _x: &[f64], _mu: &EmpiricalMeasure) -> Matrix {
        Matrix::scaled_identity(self.dim, self.a)
    }

    fn g_dxmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _y: &[f64]) -> Matrix {
        Matrix::scaled_identity(self.dim, self.b)
    }
}

/// Parameters accepted by [`bundled_spec`]; unused fields are ignored by
/// models that do not need them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BundledParams {
    pub dim: usize,
    pub horizon: f64,
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub q: f64,
}

impl Default for BundledParams {
    fn default() -> Self {
        Self {
            dim: 1,
            horizon: 1.0,
            beta: 0.0,
            a: 1.0,
            b: 0.5,
            q: 0.5,
        }
    }
}

/// Registered model names.
pub fn bundled_names() -> &'static [&'static str] {
    &[
        "free_flow",
        "lq",
        "lse",
        "anti_monotone",
        "flipped_lq",
        "second_order_gap",
    ]
}

/// Builds a registered model.
///
/// * `free_flow`: `H = ½|p|²`, `G = ½a|x|²`.
/// * `lq`: the linear-quadratic family with `a, b, q >= 0`.
/// * `lse`: `lq` plus the concave perturbation `-0.1 lse(x)` in `H`.
/// * `anti_monotone`: `free_flow` with `a = -1`.
/// * `flipped_lq`: `lq` with the coupling sign reversed (`q -> -|q|`).
/// * `second_order_gap`: displacement monotone, but fails the second-order
///   condition because `∂ₚ∂_μH ≠ 0`.
pub fn bundled_spec(name: &str, p: &BundledParams) -> Result<ModelSpec> {
    let d = p.dim;
    let fam = match name {
        "free_flow" => QuadraticFamily::free_flow(d, p.a),
        "lq" => {
            if p.a < 0.0 || p.b < 0.0 || p.q < 0.0 {
                return Err(Error::invalid("lq needs a, b, q >= 0"));
            }
            QuadraticFamily::linear_quadratic(d, p.a, p.b, p.q)
        }
        "lse" => QuadraticFamily {
            name: "lse".into(),
            kappa: 0.1,
            ..QuadraticFamily::linear_quadratic(d, p.a, p.b, p.q)
        },
        "anti_monotone" => QuadraticFamily {
            name: "anti_monotone".into(),
            ..QuadraticFamily::free_flow(d, -1.0)
        },
        "flipped_lq" => QuadraticFamily {
            name: "flipped_lq".into(),
            ..QuadraticFamily::linear_quadratic(d, p.a, p.b, -p.q.abs())
        },
        "second_order_gap" => QuadraticFamily {
            name: "second_order_gap".into(),
            c: 1.0,
            k: 0.1,
            q: 0.5,
            ..QuadraticFamily::free_flow(d, 1.0)
        },
        other => {
            return Err(Error::invalid(format!(
                "unknown model {other:?}; known: {}",
                bundled_names().join(", ")
            )))
        }
    };
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let constants = fam.constants();
    ModelSpec::new(Arc::new(fam), p.horizon, p.beta, constants)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_name_builds() {
        for name in bundled_names() {
            let spec = bundled_spec(name, &BundledParams::default()).unwrap();
            assert_eq!(spec.name, *name);
        }
        assert!(bundled_spec("nope", &BundledParams::default()).is_err());
    }

    #[test]
    fn lq_rejects_negative_parameters() {
        let p = BundledParams {
            a: -1.0,
            ..Default::default()
        };
        assert!(bundled_spec("lq", &p).is_err());
    }

    #[test]
    fn lse_gradient_is_stable_far_out() {
        let fam = QuadraticFamily {
            kappa: 0.1,
            ..QuadraticFamily::free_flow(2, 1.0)
        };
        let (v, g, _) = fam.lse(&[800.0, -3.0]);
        assert!(v.is_finite());
        assert!((g[0] - 1.0).abs() < 1e-12);
    }
}
