//! Seeded, platform-independent randomness.
//!
//! `RngState` wraps a ChaCha8 stream cipher keyed by a 64-bit seed; the same
//! seed always reproduces the same sample stream on every platform. Parallel
//! workers derive independent streams with `split`, which hashes the worker
//! index into the seed (splitmix64 of `seed XOR hash(worker)`).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cholesky, jacobi_eigh, Matrix, Vector};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    draws: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            draws: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for worker `index`: seed ⊕ splitmix64(index + 1).
    pub fn split(&self, index: u64) -> RngState {
        RngState::new(self.seed ^ splitmix64(index.wrapping_add(1)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of primitive draws taken from this state so far.
    pub fn counter(&self) -> u64 {
        self.draws
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.draws += 1;
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Uniform on [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.draws += 1;
        self.rng.gen_range(lo..hi)
    }

    pub fn next_below(&mut self, bound: usize) -> usize {
        self.draws += 1;
        self.rng.gen_range(0..bound)
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.draws += 1;
        self.rng.fill_bytes(dest);
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Factor {
    Zero,
    /// Per-coordinate standard deviations (diagonal covariance).
    Diagonal(Vec<f64>),
    /// Dense factor L with cov = L Lᵀ.
    Dense(Matrix),
}

/// Precomputed factor of a Gaussian N(mean, cov) for repeated sampling.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vector,
    factor: Factor,
    dim: usize,
}

impl GaussianSampler {
    pub fn new(mean: Vector, cov: &Matrix) -> Result<Self> {
        let d = mean.dim();
        if cov.rows() != d || cov.cols() != d {
            return Err(Error::DimMismatch(format!(
                "covariance {}x{} vs mean dim {}",
                cov.rows(),
                cov.cols(),
                d
            )));
        }
        if !cov.is_finite() {
            return Err(Error::NonFinite("gaussian covariance".into()));
        }
        let mut sym = cov.clone();
        sym.symmetrize();

        if sym.max_abs() == 0.0 {
            return Ok(GaussianSampler {
                mean,
                factor: Factor::Zero,
                dim: d,
            });
        }

        let off_diag = (0..d).all(|i| (0..d).all(|j| i == j || sym.get(i, j) == 0.0));
        if off_diag {
            let mut stds = Vec::with_capacity(d);
            for i in 0..d {
                let v = sym.get(i, i);
                if v < -1e-10 {
                    return Err(Error::IndefiniteCovariance { min_eig: v });
                }
                stds.push(v.max(0.0).sqrt());
            }
            return Ok(GaussianSampler {
                mean,
                factor: Factor::Diagonal(stds),
                dim: d,
            });
        }

        if let Some(l) = cholesky(&sym) {
            return Ok(GaussianSampler {
                mean,
                factor: Factor::Dense(l),
                dim: d,
            });
        }

        // PSD-singular or near-singular: factor through the spectrum.
        let (vals, vecs) = jacobi_eigh(&sym, 100)?;
        if let Some(&min_eig) = vals.last() {
            if min_eig < -1e-10 {
                return Err(Error::IndefiniteCovariance { min_eig });
            }
        }
        let l = Matrix::from_fn(d, d, |i, j| vecs.get(i, j) * vals[j].max(0.0).sqrt());
        Ok(GaussianSampler {
            mean,
            factor: Factor::Dense(l),
            dim: d,
        })
    }

    pub fn sample(&self, rng: &mut RngState) -> Vector {
        match &self.factor {
            Factor::Zero => self.mean.clone(),
            Factor::Diagonal(stds) => {
                let mut out = self.mean.clone();
                for (o, &s) in out.as_mut_slice().iter_mut().zip(stds) {
                    if s > 0.0 {
                        *o += s * rng.standard_normal();
                    }
                }
                out
            }
            Factor::Dense(l) => {
                let z = Vector::from((0..self.dim).map(|_| rng.standard_normal()).collect());
                self.mean.add(&l.matvec(&z))
            }
        }
    }
}
