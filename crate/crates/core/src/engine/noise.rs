use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Common-noise increments `ΔB⁰` for `scenarios` paths on a grid of `steps`
/// steps of size `dt`. Scenario `m` draws from its own ChaCha stream, so
/// adding scenarios never changes existing ones. An antithetic bundle stores
/// scenario `2j + 1` as the negation of scenario `2j`.
#[derive(Clone, Debug)]
pub struct NoiseBundle {
    pub seed: u64,
    pub scenarios: usize,
    pub steps: usize,
    pub dim: usize,
    pub dt: f64,
    pub antithetic: bool,
    increments: Vec<f64>,
}

impl NoiseBundle {
    pub fn generate(seed: u64, scenarios: usize, steps: usize, dim: usize, dt: f64) -> Result<Self> {
        Self::build(seed, scenarios, steps, dim, dt, false)
    }

    /// Antithetic pairs: pair `j` draws from stream `j`, its second member is
    /// the reflected path. An odd last scenario is left unpaired.
    pub fn antithetic(seed: u64, scenarios: usize, steps: usize, dim: usize, dt: f64) -> Result<Self> {
        Self::build(seed, scenarios, steps, dim, dt, true)
    }

    fn build(seed: u64, scenarios: usize, steps: usize, dim: usize, dt: f64, antithetic: bool) -> Result<Self> {
        if scenarios == 0 || steps == 0 || dim == 0 || !(dt > 0.0) {
            return Err(Error::invalid("noise bundle needs positive sizes and dt"));
        }
        let sd = dt.sqrt();
        let n = steps * dim;
        let mut increments: Vec<f64> = Vec::with_capacity(scenarios * n);
        for m in 0..scenarios {
            if antithetic && m % 2 == 1 {
                let o = (m - 1) * n;
                for i in 0..n {
                    let v = -increments[o + i];
                    increments.push(v);
                }
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(if antithetic { (m / 2) as u64 } else { m as u64 });
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                increments.push(sd * z);
            }
        }
        Ok(Self {
            seed,
            scenarios,
            steps,
            dim,
            dt,
            antithetic,
            increments,
        })
    }

    /// Whether averages over all scenarios should be treated as averages of
    /// independent antithetic pairs.
    pub fn paired(&self) -> bool {
        self.antithetic && self.scenarios >= 4 && self.scenarios % 2 == 0
    }

    #[inline]
    pub fn increment(&self, m: usize, k: usize) -> &[f64] {
        let o = (m * self.steps + k) * self.dim;
        &self.increments[o..o + self.dim]
    }

    /// Steps `offset..offset + steps` of every scenario.
    pub fn window(&self, offset: usize, steps: usize) -> Result<NoiseWindow<'_>> {
        if offset + steps > self.steps {
            return Err(Error::invalid(format!(
                "noise window {offset}+{steps} exceeds {} steps",
                self.steps
            )));
        }
        Ok(NoiseWindow {
            bundle: self,
            offset,
            steps,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseWindow<'a> {
    bundle: &'a NoiseBundle,
    pub offset: usize,
    pub steps: usize,
}

impl<'a> NoiseWindow<'a> {
    pub fn scenarios(&self) -> usize {
        self.bundle.scenarios
    }

    pub fn paired(&self) -> bool {
        self.bundle.paired()
    }

    #[inline]
    pub fn increment(&self, m: usize, k: usize) -> &'a [f64] {
        self.bundle.increment(m, self.offset + k)
    }

    /// `B⁰_{t_k} - B⁰_{t_0}` along scenario `m`, for `k = 0..=steps`.
    pub fn path(&self, m: usize) -> Vec<f64> {
        let d = self.bundle.dim;
        let mut out = vec![0.0; (self.steps + 1) * d];
        for k in 0..self.steps {
            let inc = self.increment(m, k);
            for c in 0..d {
                out[(k + 1) * d + c] = out[k * d + c] + inc[c];
            }
        }
        out
    }
}
