//! Sampled refutation search for displacement monotonicity of `G`, `H` and
//! solved fields, and the stronger second-order sufficient condition on `H`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Vector};
use crate::master::MasterSolution;
use crate::measure::{optimal_pairing, EmpiricalMeasure};
use crate::model::Model;

/// Draws of coupled empirical random variables on a shared sample space of
/// `atoms` equally likely outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingSampler {
    pub atoms: usize,
    /// Means are drawn in `[-radius, radius]` and atoms are clamped to `2·radius`.
    pub radius: f64,
    pub seed: u64,
    /// Random draws before the local search.
    pub trials: usize,
    /// Local search steps per restart.
    pub steps: usize,
    pub restarts: usize,
}

impl Default for CouplingSampler {
    fn default() -> Self {
        Self {
            atoms: 128,
            radius: 2.0,
            seed: 0,
            trials: 200,
            steps: 50,
            restarts: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingStyle {
    Independent,
    OptimalPairing,
    Adversarial,
}

/// One coupled draw: `ξ₁, ξ₂` and, for Hamiltonians, `p₁, p₂`; each is
/// `atoms × d`, row `i` being the value at outcome `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub dim: usize,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
    pub p1: Option<Vec<f64>>,
    pub p2: Option<Vec<f64>>,
    pub style: CouplingStyle,
    pub pairing: f64,
}

impl Witness {
    pub fn law1(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::uniform(self.dim, self.xi1.clone())
    }

    pub fn law2(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::uniform(self.dim, self.xi2.clone())
    }

    fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = vec![&mut self.xi1, &mut self.xi2];
        if let Some(p) = self.p1.as_mut() {
            v.push(p);
        }
        if let Some(p) = self.p2.as_mut() {
            v.push(p);
        }
        v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub trials: usize,
    pub min_pairing: f64,
    pub witness: Witness,
    pub tolerance: f64,
    pub pass: bool,
}

impl MonotonicityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `E[(∂ₓG(ξ₁, L₁) - ∂ₓG(ξ₂, L₂))·(ξ₁ - ξ₂)]`.
pub fn pairing_g(model: &dyn Model, w: &Witness) -> Result<f64> {
    let (l1, l2) = (w.law1()?, w.law2()?);
    Ok(gradient_pairing(w, |x| model.g_dx(x, &l1), |x| model.g_dx(x, &l2)))
}

/// The two-term pairing of `H` with `-∂ₓH` against `Δξ` and `∂ₚH` against `Δp`.
pub fn pairing_h(model: &dyn Model, w: &Witness) -> Result<f64> {
    let (l1, l2) = (w.law1()?, w.law2()?);
    let (p1, p2) = match (&w.p1, &w.p2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("Hamiltonian pairing needs p₁ and p₂")),
    };
    let d = w.dim;
    let n = w.xi1.len() / d;
    let mut acc = 0.0;
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        let (x1, x2, q1, q2) = (&w.xi1[r.clone()], &w.xi2[r.clone()], &p1[r.clone()], &p2[r]);
        let hx1 = model.h_dx(x1, &l1, q1);
        let hx2 = model.h_dx(x2, &l2, q2);
        let hp1 = model.h_dp(x1, &l1, q1);
        let hp2 = model.h_dp(x2, &l2, q2);
        for c in 0..d {
            acc += (hx2[c] - hx1[c]) * (x1[c] - x2[c]) + (hp1[c] - hp2[c]) * (q1[c] - q2[c]);
        }
    }
    Ok(acc / n as f64)
}

fn gradient_pairing(w: &Witness, f1: impl Fn(&[f64]) -> Vector, f2: impl Fn(&[f64]) -> Vector) -> f64 {
    let d = w.dim;
    let n = w.xi1.len() / d;
    let mut acc = 0.0;
    for i in 0..n {
        let (x1, x2) = (&w.xi1[i * d..(i + 1) * d], &w.xi2[i * d..(i + 1) * d]);
        let diff: Vector = f1(x1).iter().zip(&f2(x2)).map(|(a, b)| a - b).collect();
        let dx: Vector = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
        acc += dot(&diff, &dx);
    }
    acc / n as f64
}

fn draw_block(rng: &mut ChaCha8Rng, n: usize, d: usize, radius: f64) -> Vec<f64> {
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..=radius)).collect();
    let std = rng.random_range(0.2..1.5);
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n * d)
        .map(|k| (mean[k % d] + normal.sample(rng)).clamp(-2.0 * radius, 2.0 * radius))
        .collect()
}

fn draw(s: &CouplingSampler, dim: usize, with_p: bool, trial: usize) -> Result<Witness> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = s.atoms;
    let xi1 = draw_block(&mut rng, n, dim, s.radius);
    let mut xi2 = draw_block(&mut rng, n, dim, s.radius);
    let style = if trial % 2 == 0 {
        CouplingStyle::Independent
    } else {
        CouplingStyle::OptimalPairing
    };
    let (mut p1, mut p2) = (None, None);
    if with_p {
        let a = draw_block(&mut rng, n, dim, s.radius);
        // equal momenta isolate the state and measure terms
        let b = if rng.random_bool(0.5) {
            a.clone()
        } else {
            draw_block(&mut rng, n, dim, s.radius)
        };
        p1 = Some(a);
        p2 = Some(b);
    }
    if style == CouplingStyle::OptimalPairing {
        let l1 = EmpiricalMeasure::uniform(dim, xi1.clone())?;
        let l2 = EmpiricalMeasure::uniform(dim, xi2.clone())?;
        if let Some(perm) = optimal_pairing(&l1, &l2)?.permutation(n) {
            let mut re = Vec::with_capacity(xi2.len());
            for &j in &perm {
                re.extend_from_slice(&xi2[j * dim..(j + 1) * dim]);
            }
            xi2 = re;
        }
    }
    Ok(Witness {
        dim,
        xi1,
        xi2,
        p1,
        p2,
        style,
        pairing: f64::NAN,
    })
}

/// Random draws, then local descent from the worst witnesses found.
fn search(
    s: &CouplingSampler,
    dim: usize,
    with_p: bool,
    tolerance: f64,
    pairing: &mut dyn FnMut(&Witness) -> Result<f64>,
) -> Result<MonotonicityReport> {
    if s.atoms == 0 || s.trials == 0 {
        return Err(Error::invalid("the sampler needs atoms >= 1 and trials >= 1"));
    }
    let mut pool: Vec<Witness> = Vec::with_capacity(s.trials);
    for trial in 0..s.trials {
        let mut w = draw(s, dim, with_p, trial)?;
        w.pairing = pairing(&w)?;
        pool.push(w);
    }
    let mut evaluations = s.trials;
    pool.sort_by(|a, b| a.pairing.total_cmp(&b.pairing));
    let mut best = pool[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(0xA5A5_5A5A));
    for r in 0..s.restarts.min(pool.len()) {
        let mut cur = pool[r].clone();
        cur.style = CouplingStyle::Adversarial;
        let mut delta = 0.25;
        for _ in 0..s.steps {
            let mut cand = cur.clone();
            perturb(&mut cand, &mut rng, delta, s.radius);
            cand.pairing = pairing(&cand)?;
            evaluations += 1;
            if cand.pairing < cur.pairing {
                cur = cand;
                delta = (delta * 1.5).min(2.0);
            } else {
                delta = (delta * 0.7).max(1e-3);
            }
        }
        if cur.pairing < best.pairing {
            best = cur;
        }
    }
    Ok(MonotonicityReport {
        trials: evaluations,
        min_pairing: best.pairing,
        pass: best.pairing >= -tolerance,
        witness: best,
        tolerance,
    })
}

/// Moves one outcome in every variable, or with probability 1/4 translates one
/// whole variable (which moves its law's mean).
fn perturb(w: &mut Witness, rng: &mut ChaCha8Rng, delta: f64, radius: f64) {
    let d = w.dim;
    let n = w.xi1.len() / d;
    let lim = 2.0 * radius;
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { delta * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) };
    if rng.random_bool(0.25) {
        let mut blocks = w.blocks_mut();
        let b = rng.random_range(0..blocks.len());
        let shift: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        for (k, v) in blocks[b].iter_mut().enumerate() {
            *v = (*v + shift[k % d]).clamp(-lim, lim);
        }
    } else {
        let i = rng.random_range(0..n);
        for block in w.blocks_mut() {
            for c in 0..d {
                let v = &mut block[i * d + c];
                *v = (*v + gauss(rng)).clamp(-lim, lim);
            }
        }
    }
}

/// Refutation search for displacement monotonicity of `G`.
pub fn check_dm_g(model: &dyn Model, sampler: &CouplingSampler, tolerance: f64) -> Result<MonotonicityReport> {
    search(sampler, model.dim(), false, tolerance, &mut |w| pairing_g(model, w))
}

/// Refutation search for displacement monotonicity of `H`.
pub fn check_dm_h(model: &dyn Model, sampler: &CouplingSampler, tolerance: f64) -> Result<MonotonicityReport> {
    search(sampler, model.dim(), true, tolerance, &mut |w| pairing_h(model, w))
}

/// Pairing of a solved field `∂ₓV(t, ·, L_ξ)`; at the horizon this is `∂ₓG`.
pub fn pairing_field(sol: &MasterSolution, t: f64, w: &Witness) -> Result<f64> {
    let (l1, l2) = (w.law1()?, w.law2()?);
    let d = w.dim;
    let n = w.xi1.len() / d;
    let g1 = sol.eval_dxV_many(t, &l1, &w.xi1)?;
    let g2 = sol.eval_dxV_many(t, &l2, &w.xi2)?;
    let mut acc = 0.0;
    for i in 0..n {
        for c in 0..d {
            let k = i * d + c;
            acc += (g1[k] - g2[k]) * (w.xi1[k] - w.xi2[k]);
        }
    }
    Ok(acc / n as f64)
}

/// Refutation search on a solved field at time `t`.
pub fn check_field_dm(
    sol: &MasterSolution,
    t: f64,
    sampler: &CouplingSampler,
    tolerance: f64,
) -> Result<MonotonicityReport> {
    search(sampler, sol.spec().dim, false, tolerance, &mut |w| pairing_field(sol, t, w))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SecondOrderReport {
    pub trials: usize,
    /// `min (RHS - LHS)`; negative means the sufficient condition fails.
    pub min_slack: f64,
    pub witness_xi: Vec<f64>,
    pub witness_eta: Vec<f64>,
    pub witness_p: Vec<f64>,
}

/// Slack of the second-order sufficient condition for one draw `(ξ, η, p)`:
/// `-¼ E E|∂ₚₚH^{-1/2} ∂_{pμ}H η̃|² - E E[⟨∂_{xμ}H η̃, η⟩] - E⟨∂ₓₓH η, η⟩`.
pub fn second_order_slack(model: &dyn Model, dim: usize, xi: &[f64], eta: &[f64], p: &[f64]) -> Result<f64> {
    let law = EmpiricalMeasure::uniform(dim, xi.to_vec())?;
    let d = dim;
    let n = xi.len() / d;
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        let (x, e, q) = (&xi[r.clone()], &eta[r.clone()], &p[r]);
        let root = model
            .h_dpp(x, &law, q)
            .inv_sqrt_spd()
            .ok_or_else(|| Error::Singular("∂ₚₚH is not positive definite".into()))?;
        lhs += dot(&model.h_dxx(x, &law, q).mul_vec(e), e) / n as f64;
        for j in 0..n {
            let (y, f) = (&xi[j * d..(j + 1) * d], &eta[j * d..(j + 1) * d]);
            lhs += dot(&model.h_dxmu(x, &law, y, q).mul_vec(f), e) / (n * n) as f64;
            let v = root.mul_vec(&model.h_dpmu(x, &law, y, q).mul_vec(f));
            rhs -= 0.25 * dot(&v, &v) / (n * n) as f64;
        }
    }
    Ok(rhs - lhs)
}

/// Minimum slack over sampled `(ξ, η, p)`; half the draws use centred `η`.
pub fn check_second_order_h(model: &dyn Model, sampler: &CouplingSampler) -> Result<SecondOrderReport> {
    let d = model.dim();
    let n = sampler.atoms;
    if n == 0 || sampler.trials == 0 {
        return Err(Error::invalid("the sampler needs atoms >= 1 and trials >= 1"));
    }
    let mut best: Option<SecondOrderReport> = None;
    for trial in 0..sampler.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ (trial as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let xi = draw_block(&mut rng, n, d, sampler.radius);
        let mut eta = draw_block(&mut rng, n, d, sampler.radius);
        let p = draw_block(&mut rng, n, d, sampler.radius);
        if trial % 2 == 1 {
            for c in 0..d {
                let m = (0..n).map(|i| eta[i * d + c]).sum::<f64>() / n as f64;
                for i in 0..n {
                    eta[i * d + c] -= m;
                }
            }
        }
        let slack = second_order_slack(model, d, &xi, &eta, &p)?;
        if best.as_ref().is_none_or(|b| slack < b.min_slack) {
            best = Some(SecondOrderReport {
                trials: sampler.trials,
                min_slack: slack,
                witness_xi: xi,
                witness_eta: eta,
                witness_p: p,
            });
        }
    }
    Ok(best.expect("at least one trial"))
}
