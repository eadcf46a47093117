//! Minimal dense linear algebra: row-major matrices and vectors over f64,
//! power-iteration spectral norms, one-sided Jacobi SVD, a cyclic Jacobi
//! eigensolver for symmetric matrices, and seeded Gaussian sampling.
//!
//! Everything here is double precision and deterministic. There is no BLAS
//! backend; the kernels are written so the compiler can vectorize the inner
//! loops, and matrix products skip all-zero rows (ReLU gating produces many).

mod rng;
mod svd;

pub use rng::{GaussianSampler, RngState};
pub use svd::{clip_singular_values, svd};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "entry count must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        assert!(r >= 1);
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * n + i] = e;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// C = A * B. Skips all-zero entries of A, so products with row-gated
    /// matrices (diag(d) * A with many zero d) cost proportionally less.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dims");
        let mut out = Matrix::zeros(self.rows, other.cols);
        let oc = other.cols;
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            let crow = &mut out.data[i * oc..(i + 1) * oc];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * oc..(k + 1) * oc];
                for (c, &b) in crow.iter_mut().zip(brow) {
                    *c += aik * b;
                }
            }
        }
        out
    }

    /// C = A * Bᵀ.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt dims");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(arow, other.row(j));
            }
        }
        out
    }

    /// C = Aᵀ * B.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn dims");
        let mut out = Matrix::zeros(self.cols, other.cols);
        let oc = other.cols;
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let crow = &mut out.data[i * oc..(i + 1) * oc];
                for (c, &b) in crow.iter_mut().zip(brow) {
                    *c += aki * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &Vector) -> Vector {
        assert_eq!(self.cols, x.dim(), "matvec dims");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = dot(self.row(i), x.as_slice());
        }
        Vector::from(out)
    }

    /// Aᵀ x.
    pub fn matvec_t(&self, x: &Vector) -> Vector {
        assert_eq!(self.rows, x.dim(), "matvec_t dims");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x.as_slice()[i];
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        Vector::from(out)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    /// self += s * other.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace of non-square");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// diag(d) * self: row i scaled by d[i].
    pub fn scale_rows(&self, d: &[f64]) -> Matrix {
        assert_eq!(d.len(), self.rows);
        let mut out = self.clone();
        for (i, &di) in d.iter().enumerate() {
            if di == 1.0 {
                continue;
            }
            for v in out.row_mut(i) {
                *v *= di;
            }
        }
        out
    }

    /// self ← (self + selfᵀ)/2.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg;
            }
        }
    }

    /// J * P * Jᵀ for symmetric P, exploiting output symmetry and all-zero
    /// rows of J. This is the hot kernel of covariance propagation.
    pub fn congruence(&self, p: &Matrix) -> Matrix {
        assert_eq!(self.cols, p.rows);
        assert_eq!(p.rows, p.cols);
        let n = self.rows;
        let alive: Vec<bool> = (0..n).map(|i| self.row(i).iter().any(|&v| v != 0.0)).collect();
        let x = self.matmul(p); // n×p
        let mut out = Matrix::zeros(n, n);
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            let xrow = x.row(a);
            for b in 0..=a {
                if !alive[b] {
                    continue;
                }
                let v = dot(xrow, self.row(b));
                out.data[a * n + b] = v;
                out.data[b * n + a] = v;
            }
        }
        out
    }

    /// Outer product x yᵀ.
    pub fn outer(x: &Vector, y: &Vector) -> Matrix {
        let mut out = Matrix::zeros(x.dim(), y.dim());
        for i in 0..x.dim() {
            let xi = x.as_slice()[i];
            for (o, &yj) in out.row_mut(i).iter_mut().zip(y.as_slice()) {
                *o = xi * yj;
            }
        }
        out
    }
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim());
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector::from(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector::from(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::from(self.data.iter().map(|v| v * s).collect())
    }

    /// self += s * other.
    pub fn add_scaled(&mut self, other: &Vector, s: f64) {
        assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Largest singular value of `m` via power iteration on mᵀm.
///
/// Deterministic: starts from the normalized all-ones vector and perturbs it
/// deterministically if the iterate stalls in a null space.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    // The value converges quadratically, so a sigma-change criterion is both
    // fast and safe here even when the top singular values are (near-)tied.
    power_iterate(m, tol, max_iters, false).map(|(sigma, _, _)| sigma)
}

/// Top singular triple (sigma, u, v) with m v ≈ sigma u and ‖u‖ = ‖v‖ = 1.
pub fn top_singular_pair(m: &Matrix, tol: f64, max_iters: usize) -> Result<(f64, Vector, Vector)> {
    power_iterate(m, tol, max_iters, true)
}

fn power_iterate(
    m: &Matrix,
    tol: f64,
    max_iters: usize,
    require_vectors: bool,
) -> Result<(f64, Vector, Vector)> {
    assert!(tol > 0.0, "tol must be positive");
    let n = m.cols();
    if m.max_abs() == 0.0 {
        let mut u = Vector::zeros(m.rows());
        u.as_mut_slice()[0] = 1.0;
        let mut v = Vector::zeros(n);
        v.as_mut_slice()[0] = 1.0;
        return Ok((0.0, u, v));
    }
    let mut v = Vector::from(vec![1.0 / (n as f64).sqrt(); n]);
    // After each full step, (sigma, u, v) satisfies mᵀu = sigma·v exactly by
    // construction; convergence is declared when the other residual
    // ‖m·v − sigma·u‖ is below tol·sigma. The residual criterion (unlike a
    // sigma-change test) also certifies the singular vectors, and it still
    // terminates on tied top singular values because every vector in the top
    // singular subspace is a fixed point.
    let mut prev: Option<(f64, Vector)> = None;
    let mut best = (0.0, f64::INFINITY);
    for iter in 0..max_iters {
        let mv = m.matvec(&v);
        if let Some((sp, up)) = &prev {
            let metric = if require_vectors {
                mv.sub(&up.scale(*sp)).norm()
            } else {
                (mv.norm() - sp).abs()
            };
            if metric <= tol * sp.max(f64::MIN_POSITIVE) {
                return Ok((*sp, up.clone(), v));
            }
            if metric < best.1 {
                best = (*sp, metric);
            }
        }
        let sigma = mv.norm();
        if sigma == 0.0 {
            // v landed in the null space; deterministic restart.
            for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
                *x += 1e-3 * ((i + 1 + iter) as f64).sin();
            }
            let nv = v.norm();
            v = v.scale(1.0 / nv);
            prev = None;
            continue;
        }
        let u = mv.scale(1.0 / sigma);
        let w = m.matvec_t(&u);
        let wn = w.norm();
        if wn == 0.0 {
            prev = None;
            continue;
        }
        v = w.scale(1.0 / wn);
        if best.1 == f64::INFINITY {
            best.0 = wn;
        }
        prev = Some((wn, u));
    }
    Err(Error::NonConvergence {
        iters: max_iters,
        best_sigma: best.0,
        residual: best.1 / best.0.max(f64::MIN_POSITIVE),
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors-as-columns), eigenvalues descending.
pub fn jacobi_eigh(m: &Matrix, max_sweeps: usize) -> Result<(Vec<f64>, Matrix)> {
    assert_eq!(m.rows(), m.cols(), "eigh of non-square");
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut q = Matrix::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for r in (p + 1)..n {
                off = off.max(a.get(p, r).abs());
            }
        }
        if off <= 1e-14 * scale {
            let mut pairs: Vec<(f64, usize)> =
                (0..n).map(|i| (a.get(i, i), i)).collect();
            pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
            let vals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let vecs = Matrix::from_fn(n, n, |i, j| q.get(i, pairs[j].1));
            return Ok((vals, vecs));
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a.get(p, r);
                if apr.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let arr = a.get(r, r);
                let theta = (arr - app) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akr = a.get(k, r);
                    a.set(k, p, c * akp - s * akr);
                    a.set(k, r, s * akp + c * akr);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let ark = a.get(r, k);
                    a.set(p, k, c * apk - s * ark);
                    a.set(r, k, s * apk + c * ark);
                }
                for k in 0..n {
                    let qkp = q.get(k, p);
                    let qkr = q.get(k, r);
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
    }
    Err(Error::SvdNonConvergence {
        sweeps: max_sweeps,
        off_norm: {
            let mut off = 0.0f64;
            for p in 0..n {
                for r in (p + 1)..n {
                    off = off.max(a.get(p, r).abs());
                }
            }
            off
        },
    })
}

/// Cholesky factor L (lower) with m = L Lᵀ, or None if m is not positive
/// definite to working precision.
pub fn cholesky(m: &Matrix) -> Option<Matrix> {
    assert_eq!(m.rows(), m.cols());
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// One draw from N(mean, cov). Symmetrizes cov defensively; falls back to an
/// eigendecomposition factor when cov is PSD-singular, and rejects covariance
/// matrices with eigenvalues below -1e-10.
pub fn sample_gaussian(rng: &mut RngState, mean: &Vector, cov: &Matrix) -> Result<Vector> {
    let sampler = GaussianSampler::new(mean.clone(), cov)?;
    Ok(sampler.sample(rng))
}
