use super::Model;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, zeros, Vector};
use crate::measure::EmpiricalMeasure;

const MAX_NEWTON: usize = 100;
const GRAD_TOL: f64 = 1e-10;

/// Running cost `L(x, μ, a) = sup_p (-⟨p, a⟩ - H(x, μ, p))` and its maximizer,
/// by damped Newton from `p = 0`.
pub fn legendre_transform(
    model: &dyn Model,
    x: &[f64],
    mu: &EmpiricalMeasure,
    a: &[f64],
) -> Result<(f64, Vector)> {
    let d = model.dim();
    if a.len() != d || x.len() != d {
        return Err(Error::invalid("control and state must match the model dimension"));
    }
    let objective = |p: &[f64]| -dot(p, a) - model.hamiltonian(x, mu, p);
    let mut p = zeros(d);
    let mut val = objective(&p);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        // gradient of the concave objective
        let g: Vector = model
            .h_dp(x, mu, &p)
            .iter()
            .zip(a)
            .map(|(h, ai)| -ai - h)
            .collect();
        residual = norm(&g);
        if residual <= GRAD_TOL {
            return Ok((val, p));
        }
        let step = model
            .h_dpp(x, mu, &p)
            .solve(&g)
            .ok_or_else(|| Error::Singular("∂ₚₚH in the Legendre transform".into()))?;
        let mut t = 1.0;
        loop {
            let trial: Vector = p.iter().zip(&step).map(|(pi, si)| pi + t * si).collect();
            let tv = objective(&trial);
            if tv >= val - 1e-14 * val.abs().max(1.0) || t < 1e-8 {
                p = trial;
                val = tv;
                break;
            }
            t *= 0.5;
        }
        if !val.is_finite() {
            return Err(Error::NonFinite {
                what: "Legendre objective".into(),
            });
        }
    }
    Err(Error::LegendreNoConvergence {
        iterations: MAX_NEWTON,
        residual,
    })
}
