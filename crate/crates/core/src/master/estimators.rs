use serde::{Deserialize, Serialize};

use super::MasterSolution;
use crate::error::{Error, Result};
use crate::linalg::{norm, sub, unit, Vector};
use crate::measure::{wasserstein, EmpiricalMeasure};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SecondDiffReport {
    pub t: f64,
    pub h: f64,
    pub min: f64,
    pub max: f64,
    /// `(probe, axis, quotient)`.
    pub values: Vec<(Vec<f64>, usize, f64)>,
}

/// `(V(x + hλ) + V(x - hλ) - 2V(x)) / h²` over probes and coordinate directions.
pub fn estimate_second_diff(
    sol: &MasterSolution,
    t: f64,
    mu: &EmpiricalMeasure,
    probes: &[Vector],
    h: f64,
) -> Result<SecondDiffReport> {
    if !(h > 0.0) || probes.is_empty() {
        return Err(Error::invalid("second difference needs h > 0 and at least one probe"));
    }
    let d = sol.spec().dim;
    let mut values = Vec::new();
    for x in probes {
        let (v0, _) = sol.eval_V(t, x, mu)?;
        for axis in 0..d {
            let e = unit(d, axis);
            let plus: Vector = x.iter().zip(&e).map(|(a, b)| a + h * b).collect();
            let minus: Vector = x.iter().zip(&e).map(|(a, b)| a - h * b).collect();
            let (vp, _) = sol.eval_V(t, &plus, mu)?;
            let (vm, _) = sol.eval_V(t, &minus, mu)?;
            values.push((x.to_vec(), axis, (vp + vm - 2.0 * v0) / (h * h)));
        }
    }
    let min = values.iter().map(|v| v.2).fold(f64::INFINITY, f64::min);
    let max = values.iter().map(|v| v.2).fold(f64::NEG_INFINITY, f64::max);
    Ok(SecondDiffReport { t, h, min, max, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    W1,
    W2,
}

impl Metric {
    fn order(self) -> f64 {
        match self {
            Metric::W1 => 1.0,
            Metric::W2 => 2.0,
        }
    }
}

/// Pairs `(μ, μ')` of measures a fixed distance apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BumpFamily {
    /// Every atom moved by the same vector.
    MeanShift { shifts: Vec<Vec<f64>> },
    /// One atom moved by each displacement.
    AtomShift { atom: usize, displacements: Vec<Vec<f64>> },
}

impl BumpFamily {
    fn pairs(&self, base: &EmpiricalMeasure) -> Result<Vec<EmpiricalMeasure>> {
        match self {
            BumpFamily::MeanShift { shifts } => Ok(shifts.iter().map(|s| base.shifted(s)).collect()),
            BumpFamily::AtomShift { atom, displacements } => {
                if *atom >= base.len() {
                    return Err(Error::invalid("bumped atom out of range"));
                }
                Ok(displacements
                    .iter()
                    .map(|s| {
                        let p: Vector = base.point(*atom).iter().zip(s).map(|(a, b)| a + b).collect();
                        base.with_atom(*atom, &p)
                    })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub metric: Metric,
    pub t: f64,
    pub constant: f64,
    /// `(distance, max gradient change, ratio)` per bumped measure.
    pub pairs: Vec<(f64, f64, f64)>,
}

/// `max |∂ₓV(t, x, μ) - ∂ₓV(t, x, μ')| / W(μ, μ')` over bumps and probes.
pub fn estimate_measure_lipschitz(
    sol: &MasterSolution,
    t: f64,
    base: &EmpiricalMeasure,
    metric: Metric,
    family: &BumpFamily,
    probes: &[Vector],
) -> Result<LipschitzEstimate> {
    if probes.is_empty() {
        return Err(Error::invalid("Lipschitz estimate needs probes"));
    }
    let reference: Vec<Vector> = probes
        .iter()
        .map(|x| sol.eval_dxV(t, x, base))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for bumped in family.pairs(base)? {
        let w = wasserstein(metric.order(), base, &bumped)?;
        if w <= 0.0 {
            continue;
        }
        let mut change: f64 = 0.0;
        for (x, r) in probes.iter().zip(&reference) {
            let v = sol.eval_dxV(t, x, &bumped)?;
            change = change.max(norm(&sub(&v, r)));
        }
        pairs.push((w, change, change / w));
    }
    let constant = pairs.iter().map(|p| p.2).fold(0.0, f64::max);
    Ok(LipschitzEstimate {
        metric,
        t,
        constant,
        pairs,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub t_check: f64,
    pub scenarios: usize,
    /// Largest `|fresh solve - stored field|` over scenarios and probes.
    pub max_discrepancy: f64,
    /// Largest `|mean of fresh solves - stored field|` over probes.
    pub mean_discrepancy: f64,
    /// Largest scenario spread of the fresh solves over probes.
    pub spread: f64,
    /// `3 spread / √scenarios`.
    pub mc_tolerance: f64,
}

/// Compares the stored field at `t_check` with fresh solves started from the
/// measure each scenario reaches there.
pub fn decoupling_consistency(
    sol: &MasterSolution,
    t_check: f64,
    max_scenarios: usize,
    probes: &[Vector],
) -> Result<ConsistencyReport> {
    if probes.is_empty() || max_scenarios == 0 {
        return Err(Error::invalid("consistency check needs probes and scenarios"));
    }
    let (composite, start) = sol.composite(0.0, &sol.initial)?;
    debug_assert_eq!(start, 0);
    let dt = sol.time().dt;
    let k = (t_check / dt).round() as usize;
    if k > composite.field.time.steps {
        return Err(Error::invalid("t_check beyond the horizon"));
    }
    let flows = &composite.flows[..composite.flows.len().min(max_scenarios)];
    let m = flows.len();
    let mut max_discrepancy: f64 = 0.0;
    let mut mean_discrepancy: f64 = 0.0;
    let mut spread: f64 = 0.0;
    let fresh: Vec<Vec<Vector>> = flows
        .iter()
        .map(|f| {
            let nu = &f.snapshots[k];
            probes.iter().map(|x| sol.eval_dxV(t_check, x, nu)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    for (p, x) in probes.iter().enumerate() {
        let stored = composite.field.eval(k, x);
        let d = stored.len();
        let mut mean = vec![0.0; d];
        for row in &fresh {
            max_discrepancy = max_discrepancy.max(norm(&sub(&row[p], &stored)));
            for c in 0..d {
                mean[c] += row[p][c] / m as f64;
            }
        }
        mean_discrepancy = mean_discrepancy.max(norm(&sub(&mean, &stored)));
        if m > 1 {
            let var: f64 = fresh.iter().map(|row| norm(&sub(&row[p], &mean)).powi(2)).sum::<f64>() / (m - 1) as f64;
            spread = spread.max(var.sqrt());
        }
    }
    Ok(ConsistencyReport {
        t_check,
        scenarios: m,
        max_discrepancy,
        mean_discrepancy,
        spread,
        mc_tolerance: 3.0 * spread / (m as f64).sqrt(),
    })
}
