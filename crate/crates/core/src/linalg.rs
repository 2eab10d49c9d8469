//! Small dense vectors and square matrices sized for state dimensions 1 to 4.

use nalgebra::DMatrix;
use smallvec::SmallVec;

pub type Vector = SmallVec<[f64; 4]>;

pub fn zeros(dim: usize) -> Vector {
    SmallVec::from_elem(0.0, dim)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn unit(dim: usize, axis: usize) -> Vector {
    let mut e = zeros(dim);
    e[axis] = 1.0;
    e
}

/// Restarted GMRES for `A x = b` given only the action of `A`. Stops when
/// `|b - A x| <= tol |b|`; returns the solution and the final relative residual.
pub fn gmres(
    apply: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return (x, 0.0);
    }
    let mut rel = 1.0;
    let mut total = 0;
    while total < max_iter {
        let ax = apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        rel = beta / bnorm;
        if rel <= tol {
            break;
        }
        let m = restart.min(max_iter - total).max(1);
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            let mut w = apply(&basis[j]);
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(&w, v);
                h[i][j] = hij;
                axpy(-hij, v, &mut w);
            }
            let wn = norm(&w);
            h[j + 1][j] = wn;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let den = h[j][j].hypot(h[j + 1][j]);
            (cs[j], sn[j]) = if den == 0.0 { (1.0, 0.0) } else { (h[j][j] / den, h[j + 1][j] / den) };
            h[j][j] = den;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            total += 1;
            rel = g[j + 1].abs() / bnorm;
            if rel <= tol || wn <= 1e-300 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut acc = g[i];
            for k in i + 1..used {
                acc -= h[i][k] * y[k];
            }
            y[i] = acc / h[i][i];
        }
        for (k, yk) in y.iter().enumerate() {
            axpy(*yk, &basis[k], &mut x);
        }
        if rel <= tol {
            let ax = apply(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            rel = norm(&r) / bnorm;
            if rel <= tol {
                break;
            }
        }
    }
    (x, rel)
}

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: SmallVec<[f64; 16]>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: SmallVec::from_elem(0.0, dim * dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = s;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.data[i * dim + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(dim: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), dim * dim);
        Self {
            dim,
            data: SmallVec::from_slice(data),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vector {
        let d = self.dim;
        (0..d)
            .map(|i| dot(&self.data[i * d..(i + 1) * d], v))
            .collect()
    }

    /// `selfᵀ v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vector {
        let d = self.dim;
        let mut out = zeros(d);
        for i in 0..d {
            for j in 0..d {
                out[j] += self.data[i * d + j] * v[i];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self.get(j, i))
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }

    /// Spectral norm.
    pub fn op_norm(&self) -> f64 {
        if self.dim == 1 {
            return self.data[0].abs();
        }
        self.to_na()
            .singular_values()
            .iter()
            .fold(0.0, |a, &b| f64::max(a, b))
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_sym_eigenvalue(&self) -> f64 {
        if self.dim == 1 {
            return self.data[0];
        }
        let m = self.to_na();
        let sym = (&m + m.transpose()) * 0.5;
        sym.symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// `S^{-1/2}` for a symmetric positive definite `S`; `None` when not positive definite.
    pub fn inv_sqrt_spd(&self) -> Option<Matrix> {
        if self.dim == 1 {
            let v = self.data[0];
            return (v > 0.0).then(|| Matrix::from_rows(1, &[1.0 / v.sqrt()]));
        }
        let m = self.to_na();
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return None;
        }
        let d = self.dim;
        Some(Matrix::from_fn(d, |i, j| {
            (0..d)
                .map(|k| eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / eig.eigenvalues[k].sqrt())
                .sum()
        }))
    }

    /// Solves `self x = b`.
    pub fn solve(&self, b: &[f64]) -> Option<Vector> {
        if self.dim == 1 {
            let a = self.data[0];
            return (a != 0.0).then(|| smallvec::smallvec![b[0] / a]);
        }
        let lu = self.to_na().lu();
        let rhs = nalgebra::DVector::from_column_slice(b);
        lu.solve(&rhs).map(|x| x.iter().copied().collect())
    }
}
