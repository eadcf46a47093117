//! Full singular value decomposition by one-sided Jacobi rotations.
//!
//! Adequate and bit-stable at the sizes this crate works with (n ≈ 60);
//! column pairs are orthogonalized in a fixed cyclic order so the result is
//! identical across platforms at double precision.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;
const ORTHO_TOL: f64 = 1e-13;

/// Thin SVD: m = U diag(s) Vᵀ with U (r×k), s (k), V (c×k), k = min(r, c).
/// Singular values are sorted in descending order.
pub fn svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let (u, s, v) = svd_tall(&m.transpose())?;
        Ok((v, s, u))
    }
}

fn svd_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (r, c) = (m.rows(), m.cols());
    let mut b = m.clone();
    let mut v = Matrix::identity(c);
    let scale = m.max_abs();
    if scale == 0.0 {
        return Ok((Matrix::zeros(r, c), vec![0.0; c], v));
    }

    let mut converged = false;
    let mut sweeps = 0;
    let mut max_off = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        max_off = 0.0;
        for p in 0..c {
            for q in (p + 1)..c {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..r {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= ORTHO_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    b.set(i, p, cs * bp - sn * bq);
                    b.set(i, q, sn * bp + cs * bq);
                }
                for i in 0..c {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, cs * vp - sn * vq);
                    v.set(i, q, sn * vp + cs * vq);
                }
            }
        }
        if max_off <= ORTHO_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            sweeps,
            off_norm: max_off,
        });
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..c).collect();
    let norms: Vec<f64> = (0..c)
        .map(|j| (0..r).map(|i| b.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &bb| norms[bb].partial_cmp(&norms[a]).unwrap());

    let mut u = Matrix::zeros(r, c);
    let mut s = Vec::with_capacity(c);
    let mut v_sorted = Matrix::zeros(c, c);
    for (out_j, &j) in order.iter().enumerate() {
        let sj = norms[j];
        s.push(sj);
        if sj > 0.0 {
            for i in 0..r {
                u.set(i, out_j, b.get(i, j) / sj);
            }
        }
        for i in 0..c {
            v_sorted.set(i, out_j, v.get(i, j));
        }
    }
    Ok((u, s, v_sorted))
}

/// U min(S, cap) Vᵀ: caps the singular values of `m` at `cap`.
/// Returns the input unchanged when no singular value exceeds the cap.
pub fn clip_singular_values(m: &Matrix, cap: f64) -> Result<Matrix> {
    assert!(cap > 0.0, "cap must be positive");
    let (u, s, v) = svd(m)?;
    if s.iter().all(|&x| x <= cap) {
        return Ok(m.clone());
    }
    let clipped: Vec<f64> = s.iter().map(|&x| x.min(cap)).collect();
    // U diag(s') Vᵀ
    let us = Matrix::from_fn(u.rows(), clipped.len(), |i, j| u.get(i, j) * clipped[j]);
    Ok(us.matmul_nt(&v))
}
