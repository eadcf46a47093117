//! Shared oracles for the integration tests: an independent textbook Jacobi
//! eigensolver (kept deliberately separate from the library code), central
//! finite differences, and random problem generators.

#![allow(dead_code)]

use rnn_robust::train::GradientSet;
use rnn_robust::{ActivationKind, Matrix, NoiseSpec, RngState, RnnParams, Vector};

/// Eigenvalues of a symmetric matrix, descending, by classical Jacobi
/// rotations on a plain `Vec<Vec<f64>>` (independent of the library's
/// implementation).
pub fn oracle_symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols());
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..200 {
        // Largest off-diagonal element.
        let (mut p, mut q, mut big) = (0, 1, 0.0_f64);
        for i in 0..n {
            for j in (i + 1)..n {
                if a[i][j].abs() > big {
                    big = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if n < 2 || big < 1e-14 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..n {
            let (akp, akq) = (a[k][p], a[k][q]);
            a[k][p] = c * akp - s * akq;
            a[k][q] = s * akp + c * akq;
        }
        for k in 0..n {
            let (apk, aqk) = (a[p][k], a[q][k]);
            a[p][k] = c * apk - s * aqk;
            a[q][k] = s * apk + c * aqk;
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    vals
}

/// Singular values of an arbitrary matrix through the Gram-matrix oracle.
pub fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let g = m.matmul_tn(m);
    oracle_symmetric_eigenvalues(&g)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

/// Random symmetric PSD matrix G·Gᵀ / dim.
pub fn random_psd(dim: usize, rng: &mut RngState) -> Matrix {
    let g = random_matrix(dim, dim, rng);
    g.matmul_nt(&g).scale(1.0 / dim as f64)
}

pub fn random_params(
    n: usize,
    d: usize,
    m: usize,
    act: ActivationKind,
    scale: f64,
    rng: &mut RngState,
) -> RnnParams {
    let mut p = RnnParams::init(n, d, m, act, rng);
    p.w_hh = p.w_hh.scale(scale);
    p
}

pub fn random_inputs(seq_len: usize, d: usize, rng: &mut RngState) -> Vec<Vector> {
    (0..seq_len)
        .map(|_| Vector::from((0..d).map(|_| rng.standard_normal()).collect()))
        .collect()
}

/// Random time-constant dense-PSD noise model.
pub fn random_noise(n: usize, d: usize, with_gamma: bool, rng: &mut RngState) -> NoiseSpec {
    let sigma = random_psd(d, rng);
    let gamma = if with_gamma {
        random_psd(n, rng)
    } else {
        Matrix::zeros(n, n)
    };
    NoiseSpec::new(rnn_robust::robustness::InputCov::Constant(sigma), gamma)
}

/// Central finite differences of a scalar function of the parameters,
/// entry by entry, step h.
pub fn fd_gradient(
    params: &RnnParams,
    h: f64,
    mut f: impl FnMut(&RnnParams) -> f64,
) -> GradientSet {
    let mut g = GradientSet::zeros_like(params);
    let mut work = params.clone();

    macro_rules! fd_matrix {
        ($field:ident, $out:ident) => {
            for i in 0..params.$field.rows() {
                for j in 0..params.$field.cols() {
                    let orig = params.$field.get(i, j);
                    work.$field.set(i, j, orig + h);
                    let fp = f(&work);
                    work.$field.set(i, j, orig - h);
                    let fm = f(&work);
                    work.$field.set(i, j, orig);
                    g.$out.set(i, j, (fp - fm) / (2.0 * h));
                }
            }
        };
    }
    fd_matrix!(w_hh, d_w_hh);
    fd_matrix!(w_ih, d_w_ih);
    fd_matrix!(w_ho, d_w_ho);
    for i in 0..params.b_h.dim() {
        let orig = params.b_h.as_slice()[i];
        work.b_h.as_mut_slice()[i] = orig + h;
        let fp = f(&work);
        work.b_h.as_mut_slice()[i] = orig - h;
        let fm = f(&work);
        work.b_h.as_mut_slice()[i] = orig;
        g.d_b_h.as_mut_slice()[i] = (fp - fm) / (2.0 * h);
    }
    for i in 0..params.b_o.dim() {
        let orig = params.b_o.as_slice()[i];
        work.b_o.as_mut_slice()[i] = orig + h;
        let fp = f(&work);
        work.b_o.as_mut_slice()[i] = orig - h;
        let fm = f(&work);
        work.b_o.as_mut_slice()[i] = orig;
        g.d_b_o.as_mut_slice()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Frobenius-relative error ‖a − b‖ / max(‖b‖, floor).
pub fn grad_rel_error(a: &GradientSet, b: &GradientSet) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    let mut acc = |x: f64, y: f64| {
        diff += (x - y) * (x - y);
        norm += y * y;
    };
    for (x, y) in a.d_w_hh.as_slice().iter().zip(b.d_w_hh.as_slice()) {
        acc(*x, *y);
    }
    for (x, y) in a.d_w_ih.as_slice().iter().zip(b.d_w_ih.as_slice()) {
        acc(*x, *y);
    }
    for (x, y) in a.d_b_h.as_slice().iter().zip(b.d_b_h.as_slice()) {
        acc(*x, *y);
    }
    for (x, y) in a.d_w_ho.as_slice().iter().zip(b.d_w_ho.as_slice()) {
        acc(*x, *y);
    }
    for (x, y) in a.d_b_o.as_slice().iter().zip(b.d_b_o.as_slice()) {
        acc(*x, *y);
    }
    diff.sqrt() / norm.sqrt().max(1e-10)
}
