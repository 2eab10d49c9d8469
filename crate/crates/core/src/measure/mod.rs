//! Weighted empirical measures on ℝᵈ, optimal transport between them and
//! their serialization.

mod io;
mod ot;

pub use io::{read_measure_csv, read_measure_json, write_measure_csv, write_measure_json};
pub use ot::{optimal_pairing, transport_plan, wasserstein, Coupling, OT_ATOM_LIMIT};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{zeros, Vector};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Finite collection of atoms `x_i ∈ ℝᵈ` with positive weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Arc<[f64]>,
    mean: Vector,
}

#[derive(Serialize, Deserialize)]
struct MeasureRepr {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<MeasureRepr> for EmpiricalMeasure {
    type Error = Error;
    fn try_from(r: MeasureRepr) -> Result<Self> {
        if r.points.iter().any(|p| p.len() != r.dim) {
            return Err(Error::invalid("atom dimension does not match `dim`"));
        }
        let flat = r.points.into_iter().flatten().collect();
        EmpiricalMeasure::new(r.dim, flat, r.weights)
    }
}

impl From<EmpiricalMeasure> for MeasureRepr {
    fn from(m: EmpiricalMeasure) -> Self {
        MeasureRepr {
            dim: m.dim,
            points: m.points.chunks(m.dim).map(<[f64]>::to_vec).collect(),
            weights: m.weights.to_vec(),
        }
    }
}

impl EmpiricalMeasure {
    /// Builds a measure from row-major atoms. Weights must be positive and sum to one.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if points.len() != dim * weights.len() || weights.is_empty() {
            return Err(Error::invalid(format!(
                "{} coordinates do not form {} atoms of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        crate::error::ensure_finite(&points, "measure atoms")?;
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("weights must be positive and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self::from_parts(dim, points, weights.into()))
    }

    /// Equal weights `1/n`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::invalid("atom coordinates do not match the dimension"));
        }
        let n = points.len() / dim;
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn dirac(x: &[f64]) -> Self {
        Self::from_parts(x.len(), x.to_vec(), Arc::from(vec![1.0]))
    }

    /// Trusted constructor for particle snapshots; weights are shared, not copied.
    pub(crate) fn from_parts(dim: usize, points: Vec<f64>, weights: Arc<[f64]>) -> Self {
        let mut mean = zeros(dim);
        for (p, w) in points.chunks_exact(dim).zip(weights.iter()) {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += w * x;
            }
        }
        Self {
            dim,
            points,
            weights,
            mean,
        }
    }

    /// `n` i.i.d. draws from `N(mean, std² I)` with equal weights.
    pub fn sample_gaussian(dim: usize, n: usize, mean: f64, std: f64, seed: u64) -> Result<Self> {
        if n == 0 || !(std >= 0.0) {
            return Err(Error::invalid("need n > 0 and std >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n * dim)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::uniform(dim, pts)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn shared_weights(&self) -> Arc<[f64]> {
        self.weights.clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn second_moment(&self) -> f64 {
        self.iter()
            .map(|(p, w)| w * crate::linalg::dot(p, p))
            .sum()
    }

    pub fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-15)
    }

    /// Translation by `v`.
    pub fn shifted(&self, v: &[f64]) -> Self {
        let mut pts = self.points.clone();
        for p in pts.chunks_exact_mut(self.dim) {
            for (x, s) in p.iter_mut().zip(v) {
                *x += s;
            }
        }
        Self::from_parts(self.dim, pts, self.weights.clone())
    }

    /// Same weights with atom `i` moved to `x`.
    pub fn with_atom(&self, i: usize, x: &[f64]) -> Self {
        let mut pts = self.points.clone();
        pts[i * self.dim..(i + 1) * self.dim].copy_from_slice(x);
        Self::from_parts(self.dim, pts, self.weights.clone())
    }

    /// Same weights with new atom positions.
    pub fn with_points(&self, points: Vec<f64>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::invalid("atom count mismatch"));
        }
        crate::error::ensure_finite(&points, "measure atoms")?;
        Ok(Self::from_parts(self.dim, points, self.weights.clone()))
    }

    /// Clamps every coordinate into `[-r, r]`.
    pub fn clamped(&self, r: f64) -> Self {
        let pts = self.points.iter().map(|x| x.clamp(-r, r)).collect();
        Self::from_parts(self.dim, pts, self.weights.clone())
    }
}

/// Projects each atom onto the `1/n` grid of the cube `[-n, n]ᵈ`: coordinates are
/// floored to the grid and indices clamped to `[-n², n²]`; coincident atoms merge.
pub fn quantize_cube(mu: &EmpiricalMeasure, n: u32) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::invalid("quantization level must be positive"));
    }
    let nf = f64::from(n);
    let cap = i64::from(n) * i64::from(n);
    let mut cells: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    for (p, w) in mu.iter() {
        let key: Vec<i64> = p
            .iter()
            .map(|x| ((x * nf).floor() as i64).clamp(-cap, cap))
            .collect();
        *cells.entry(key).or_insert(0.0) += w;
    }
    let mut points = Vec::with_capacity(cells.len() * mu.dim());
    let mut weights = Vec::with_capacity(cells.len());
    for (key, w) in cells {
        points.extend(key.iter().map(|&i| i as f64 / nf));
        weights.push(w);
    }
    Ok(EmpiricalMeasure::from_parts(mu.dim(), points, weights.into()))
}

/// `n` i.i.d. draws from `mu`, equally weighted.
pub fn resample(mu: &EmpiricalMeasure, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::invalid("resample size must be positive"));
    }
    let mut cdf = Vec::with_capacity(mu.len());
    let mut acc = 0.0;
    for &w in mu.weights() {
        acc += w;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n * mu.dim());
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * acc;
        let i = cdf.partition_point(|&c| c <= u).min(mu.len() - 1);
        pts.extend_from_slice(mu.point(i));
    }
    EmpiricalMeasure::uniform(mu.dim(), pts)
}
