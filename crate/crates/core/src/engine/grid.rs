use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{zeros, Matrix, Vector};

/// Uniform time grid `t0 + k dt`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        if !(t1 > t0) || !(dt > 0.0) {
            return Err(Error::invalid(format!("bad time grid [{t0}, {t1}] with dt {dt}")));
        }
        let steps = ((t1 - t0) / dt).round().max(1.0) as usize;
        Ok(Self {
            t0,
            dt: (t1 - t0) / steps as f64,
            steps,
        })
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.dt * self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }
}

/// Tensor grid on the box `[-half_width, half_width]ᵈ` with `points` nodes per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub dim: usize,
    pub half_width: f64,
    pub points: usize,
}

impl SpatialGrid {
    pub fn new(dim: usize, half_width: f64, points: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::invalid(format!("grid fields support d <= 3, got {dim}")));
        }
        if !(half_width > 0.0) || points < 2 {
            return Err(Error::invalid("grid needs a positive box and >= 2 points per axis"));
        }
        Ok(Self {
            dim,
            half_width,
            points,
        })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + self.spacing() * i as f64
    }

    /// Node with flat index `idx`; axis 0 varies slowest.
    pub fn node(&self, idx: usize) -> Vector {
        let mut out = zeros(self.dim);
        let mut rem = idx;
        for a in (0..self.dim).rev() {
            out[a] = self.coord(rem % self.points);
            rem /= self.points;
        }
        out
    }

    /// Points further than twice the half width from the origin on some axis escape.
    #[inline]
    pub fn in_guard(&self, x: &[f64]) -> bool {
        let g = 2.0 * self.half_width;
        x.iter().all(|v| v.abs() <= g)
    }

    #[inline]
    fn cell(&self, v: f64) -> (usize, f64) {
        let s = (v + self.half_width) / self.spacing();
        let i = (s.floor().max(0.0) as usize).min(self.points - 2);
        (i, s - i as f64)
    }
}

/// Vector-valued function sampled on a [`SpatialGrid`], multilinear in each
/// cell and extended linearly outside the box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridFn {
    pub grid: Arc<SpatialGrid>,
    pub comps: usize,
    pub values: Vec<f64>,
}

impl GridFn {
    pub fn zeros(grid: Arc<SpatialGrid>, comps: usize) -> Self {
        let n = grid.len() * comps;
        Self {
            grid,
            comps,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: Arc<SpatialGrid>, comps: usize, mut f: impl FnMut(&[f64]) -> Vector) -> Self {
        let mut values = Vec::with_capacity(grid.len() * comps);
        for idx in 0..grid.len() {
            let v = f(&grid.node(idx));
            values.extend_from_slice(&v[..comps]);
        }
        Self {
            grid,
            comps,
            values,
        }
    }

    pub fn node_value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.comps..(idx + 1) * self.comps]
    }

    pub fn eval(&self, x: &[f64]) -> Vector {
        let mut out = zeros(self.comps);
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let g = &*self.grid;
        let c = self.comps;
        match g.dim {
            1 => {
                let (i, f) = g.cell(x[0]);
                let a = &self.values[i * c..(i + 1) * c];
                let b = &self.values[(i + 1) * c..(i + 2) * c];
                for k in 0..c {
                    out[k] = a[k] + f * (b[k] - a[k]);
                }
            }
            d => {
                let mut base = [0usize; 3];
                let mut frac = [0.0f64; 3];
                for a in 0..d {
                    let (i, f) = g.cell(x[a]);
                    base[a] = i;
                    frac[a] = f;
                }
                out[..c].fill(0.0);
                for corner in 0..(1usize << d) {
                    let mut w = 1.0;
                    let mut flat = 0;
                    for a in 0..d {
                        let bit = (corner >> (d - 1 - a)) & 1;
                        w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                        flat = flat * g.points + base[a] + bit;
                    }
                    let v = &self.values[flat * c..(flat + 1) * c];
                    for k in 0..c {
                        out[k] += w * v[k];
                    }
                }
            }
        }
    }

    /// Jacobian of the interpolant, `J[i][j] = ∂ⱼ fᵢ`; requires `comps == dim`.
    pub fn jacobian(&self, x: &[f64]) -> Matrix {
        let g = &*self.grid;
        let d = g.dim;
        let h = g.spacing();
        let mut jac = Matrix::zeros(d);
        for j in 0..d {
            let (i, _) = g.cell(x[j]);
            let mut lo: Vector = x.iter().copied().collect();
            let mut hi = lo.clone();
            lo[j] = g.coord(i);
            hi[j] = g.coord(i + 1);
            let a = self.eval(&lo);
            let b = self.eval(&hi);
            for r in 0..d {
                jac.set(r, j, (b[r] - a[r]) / h);
            }
        }
        jac
    }

    /// `∫₀¹ ⟨f(a + s(b - a)), b - a⟩ ds`, exact for the interpolant: the
    /// segment is split where it crosses grid planes and each piece, a
    /// polynomial of degree <= d, is integrated by 2-point Gauss.
    pub fn line_integral(&self, a: &[f64], b: &[f64]) -> f64 {
        let g = &*self.grid;
        let d = g.dim;
        let dir: Vector = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let mut cuts = vec![0.0, 1.0];
        for ax in 0..d {
            if dir[ax] == 0.0 {
                continue;
            }
            for i in 1..g.points - 1 {
                let s = (g.coord(i) - a[ax]) / dir[ax];
                if s > 0.0 && s < 1.0 {
                    cuts.push(s);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        let r = 0.5 / 3f64.sqrt();
        let mut total = 0.0;
        let mut pt = zeros(d);
        for w in cuts.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let len = s1 - s0;
            if len <= 0.0 {
                continue;
            }
            let mid = 0.5 * (s0 + s1);
            for s in [mid - r * len, mid + r * len] {
                for k in 0..d {
                    pt[k] = a[k] + s * dir[k];
                }
                total += 0.5 * len * crate::linalg::dot(&self.eval(&pt), &dir);
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_grid_snaps_to_whole_steps() {
        let g = TimeGrid::new(0.25, 0.5, 0.01).unwrap();
        assert_eq!(g.steps, 25);
        assert!((g.t1() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_functions_are_reproduced_everywhere() {
        for d in 1..=2 {
            let g = Arc::new(SpatialGrid::new(d, 6.0, 9).unwrap());
            let f = GridFn::from_fn(g, d, |x| x.iter().enumerate().map(|(i, v)| (i as f64 + 2.0) * v + 1.0).collect());
            for x in [[0.3, -1.7], [5.9, 5.9], [9.0, -11.0]] {
                let v = f.eval(&x[..d]);
                for i in 0..d {
                    assert!((v[i] - ((i as f64 + 2.0) * x[i] + 1.0)).abs() < 1e-12);
                }
                let j = f.jacobian(&x[..d]);
                assert!((j.get(0, 0) - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_corner_weights() {
        let g = Arc::new(SpatialGrid::new(2, 1.0, 2).unwrap());
        let f = GridFn::from_fn(g, 1, |x| smallvec::smallvec![x[0] * x[1]]);
        assert!((f.eval(&[0.5, 0.5])[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn line_integral_of_a_gradient_is_the_potential_difference() {
        let g = Arc::new(SpatialGrid::new(1, 6.0, 65).unwrap());
        let f = GridFn::from_fn(g, 1, |x| smallvec::smallvec![0.7 * x[0] - 0.2]);
        let pot = |x: f64| 0.35 * x * x - 0.2 * x;
        let v = f.line_integral(&[0.0], &[8.5]);
        assert!((v - (pot(8.5) - pot(0.0))).abs() < 1e-12);
        let g2 = Arc::new(SpatialGrid::new(2, 6.0, 17).unwrap());
        let f2 = GridFn::from_fn(g2, 2, |x| smallvec::smallvec![x[0], 2.0 * x[1]]);
        let v2 = f2.line_integral(&[0.0, 0.0], &[1.3, -2.1]);
        assert!((v2 - (0.5 * 1.3 * 1.3 + 2.1 * 2.1)).abs() < 1e-12);
    }

    #[test]
    fn guard_is_twice_the_box() {
        let g = SpatialGrid::new(1, 6.0, 65).unwrap();
        assert!(g.in_guard(&[11.9]));
        assert!(!g.in_guard(&[12.1]));
    }
}
