//! Monte Carlo ground truth for the robustness measure, noise-amplitude
//! misclassification sweeps, and threshold extraction.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{corrupt, Dataset, SampleLabel};
use crate::error::{Error, Result};
use crate::linalg::{GaussianSampler, RngState, Vector};
use crate::model::{forward, LossSpec, RnnParams};
use crate::robustness::NoiseSpec;
use crate::train::sequence_loss;

/// Sample mean with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Config(
                "Monte Carlo estimate needs at least 2 samples".into(),
            ));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Ok(McEstimate {
            mean,
            std_error: (var / n as f64).sqrt(),
            samples: n,
        })
    }
}

/// Index of the largest entry; ties broken by the lowest index.
pub fn argmax(v: &Vector) -> usize {
    let s = v.as_slice();
    let mut best = 0;
    for (i, &x) in s.iter().enumerate().skip(1) {
        if x > s[best] {
            best = i;
        }
    }
    best
}

/// Classify by argmax over the final-step output.
pub fn predict_class(params: &RnnParams, inputs: &[Vector], x0: &Vector) -> Result<usize> {
    let traj = forward(params, inputs, x0)?;
    Ok(argmax(traj.outputs.last().expect("empty trajectory")))
}

struct NoisyRollout {
    init: Option<GaussianSampler>,
    steps: Vec<GaussianSampler>,
}

impl NoisyRollout {
    fn new(x0: &Vector, noise: &NoiseSpec, seq_len: usize) -> Result<Self> {
        let init = if noise.init_cov.max_abs() == 0.0 {
            None
        } else {
            Some(GaussianSampler::new(x0.clone(), &noise.init_cov)?)
        };
        let d = noise.input_dim();
        let zero_u = Vector::zeros(d);
        let mut steps = Vec::with_capacity(seq_len);
        if noise.is_constant() {
            let s = GaussianSampler::new(zero_u.clone(), noise.sigma_at(1))?;
            for _ in 0..seq_len {
                steps.push(s.clone());
            }
        } else {
            for t in 1..=seq_len {
                steps.push(GaussianSampler::new(zero_u.clone(), noise.sigma_at(t))?);
            }
        }
        Ok(NoisyRollout { init, steps })
    }

    /// Draw x̃₀ ~ N(x₀, Γ) and ũ_t = u_t + w_t, w_t ~ N(0, Σ_t).
    fn sample_inputs(
        &self,
        x0: &Vector,
        inputs: &[Vector],
        rng: &mut RngState,
    ) -> (Vector, Vec<Vector>) {
        let x0_noisy = match &self.init {
            Some(s) => s.sample(rng),
            None => x0.clone(),
        };
        let noisy: Vec<Vector> = inputs
            .iter()
            .zip(&self.steps)
            .map(|(u, s)| {
                let mut w = s.sample(rng);
                w.add_scaled(u, 1.0);
                w
            })
            .collect();
        (x0_noisy, noisy)
    }
}

/// Monte Carlo estimate of ρ_t = E‖ỹ_t − y_t‖² at every t = 1..T in one
/// pass: each realization draws fresh x̃₀ and w_1..w_T.
pub fn mc_rho_profile(
    params: &RnnParams,
    inputs: &[Vector],
    x0: &Vector,
    noise: &NoiseSpec,
    n_samples: usize,
    rng: &RngState,
) -> Result<Vec<McEstimate>> {
    if n_samples < 2 {
        return Err(Error::Config("n_samples must be >= 2".into()));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("input sequence".into()));
    }
    let clean = forward(params, inputs, x0)?;
    let rollout = NoisyRollout::new(x0, noise, inputs.len())?;
    let per_sample: Vec<Result<Vec<f64>>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut child = rng.split(s as u64);
            let (x0n, un) = rollout.sample_inputs(x0, inputs, &mut child);
            let noisy = forward(params, &un, &x0n)?;
            Ok(noisy
                .outputs
                .iter()
                .zip(&clean.outputs)
                .map(|(yn, y)| {
                    let d = yn.sub(y);
                    d.dot(&d)
                })
                .collect())
        })
        .collect();
    let mut per_t: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); inputs.len()];
    for r in per_sample {
        for (t, v) in r?.into_iter().enumerate() {
            per_t[t].push(v);
        }
    }
    per_t.iter().map(|vals| McEstimate::from_values(vals)).collect()
}

/// Monte Carlo estimate of ρ_t at a single step t (1-based).
pub fn mc_rho(
    params: &RnnParams,
    inputs: &[Vector],
    x0: &Vector,
    noise: &NoiseSpec,
    t: usize,
    n_samples: usize,
    rng: &RngState,
) -> Result<McEstimate> {
    if t == 0 || t > inputs.len() {
        return Err(Error::Config(format!(
            "t = {t} outside 1..={}",
            inputs.len()
        )));
    }
    let profile = mc_rho_profile(params, &inputs[..t], x0, noise, n_samples, rng)?;
    Ok(profile.into_iter().last().expect("nonempty profile"))
}

/// Monte Carlo estimate of the expected loss under input noise,
/// E{L(ỹ_1..ỹ_T)} for the configured loss/aggregation.
pub fn mc_expected_loss(
    params: &RnnParams,
    inputs: &[Vector],
    x0: &Vector,
    noise: &NoiseSpec,
    spec: &LossSpec,
    label: &SampleLabel,
    n_samples: usize,
    rng: &RngState,
) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(Error::Config("n_samples must be >= 2".into()));
    }
    let rollout = NoisyRollout::new(x0, noise, inputs.len())?;
    let values: Vec<Result<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut child = rng.split(s as u64);
            let (x0n, un) = rollout.sample_inputs(x0, inputs, &mut child);
            let noisy = forward(params, &un, &x0n)?;
            sequence_loss(spec, &noisy, label)
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    McEstimate::from_values(&values)
}

/// Largest output norm max_t ‖ỹ_t‖ observed over noisy rollouts (including
/// the clean one); used to bound the loss Lipschitz constant on the region
/// the outputs actually visit.
pub fn mc_max_output_norm(
    params: &RnnParams,
    inputs: &[Vector],
    x0: &Vector,
    noise: &NoiseSpec,
    n_samples: usize,
    rng: &RngState,
) -> Result<f64> {
    let clean = forward(params, inputs, x0)?;
    let rollout = NoisyRollout::new(x0, noise, inputs.len())?;
    let maxima: Vec<Result<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut child = rng.split(s as u64);
            let (x0n, un) = rollout.sample_inputs(x0, inputs, &mut child);
            let noisy = forward(params, &un, &x0n)?;
            Ok(noisy.outputs.iter().map(|y| y.norm()).fold(0.0, f64::max))
        })
        .collect();
    let mut best = clean.outputs.iter().map(|y| y.norm()).fold(0.0, f64::max);
    for m in maxima {
        best = best.max(m?);
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub omega: f64,
    pub misclassification_pct: f64,
    /// ‖ỹ_T − y_T‖² pooled over all (sample, repeat) corruptions.
    pub mc_rho_final: McEstimate,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub model_id: String,
    pub seed: u64,
    pub n_repeats: usize,
}

impl SweepResult {
    pub fn to_table(&self) -> String {
        let mut out = String::from("omega,misclassification_pct,rho_mc_mean,rho_mc_stderr\n");
        for r in &self.rows {
            writeln!(
                out,
                "{:.6},{:.6},{:.12e},{:.12e}",
                r.omega, r.misclassification_pct, r.mc_rho_final.mean, r.mc_rho_final.std_error
            )
            .unwrap();
        }
        out
    }
}

/// For each ω, corrupt every test sample with Σ = ωI (n_repeats independent
/// corruptions each) and report the misclassification percentage plus the
/// pooled final-step deviation.
pub fn noise_sweep(
    params: &RnnParams,
    testset: &Dataset,
    omegas: &[f64],
    n_repeats: usize,
    rng: &RngState,
) -> Result<SweepResult> {
    if testset.is_empty() {
        return Err(Error::EmptyDataset("sweep test set".into()));
    }
    if omegas.is_empty() {
        return Err(Error::Config("omega grid is empty".into()));
    }
    if n_repeats == 0 {
        return Err(Error::Config("n_repeats must be >= 1".into()));
    }
    for w in omegas.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config("omegas must be strictly increasing".into()));
        }
    }
    if omegas[0] < 0.0 {
        return Err(Error::Config("omegas must be >= 0".into()));
    }
    let x0 = Vector::zeros(params.state_dim());
    let mut rows = Vec::with_capacity(omegas.len());
    for (wi, &omega) in omegas.iter().enumerate() {
        let omega_rng = rng.split(wi as u64);
        let per_sample: Vec<Result<(usize, Vec<f64>)>> = testset
            .samples
            .par_iter()
            .enumerate()
            .map(|(si, sample)| {
                let label = match sample.label {
                    SampleLabel::Class(c) => c,
                    SampleLabel::Sequence(_) => {
                        return Err(Error::Config(
                            "noise_sweep needs classification labels".into(),
                        ))
                    }
                };
                let clean = forward(params, &sample.inputs, &x0)?;
                let y_clean = clean.outputs.last().expect("empty trajectory");
                let mut child = omega_rng.split(si as u64);
                let mut wrong = 0;
                let mut rho = Vec::with_capacity(n_repeats);
                for _ in 0..n_repeats {
                    let noisy_sample = corrupt(sample, omega, &mut child);
                    let traj = forward(params, &noisy_sample.inputs, &x0)?;
                    let y = traj.outputs.last().expect("empty trajectory");
                    if argmax(y) != label {
                        wrong += 1;
                    }
                    let d = y.sub(y_clean);
                    rho.push(d.dot(&d));
                }
                Ok((wrong, rho))
            })
            .collect();
        let mut wrong_total = 0usize;
        let mut rho_all = Vec::with_capacity(testset.len() * n_repeats);
        for r in per_sample {
            let (w, mut rho) = r?;
            wrong_total += w;
            rho_all.append(&mut rho);
        }
        let total = testset.len() * n_repeats;
        rows.push(SweepRow {
            omega,
            misclassification_pct: 100.0 * wrong_total as f64 / total as f64,
            mc_rho_final: McEstimate::from_values(&rho_all)?,
        });
    }
    Ok(SweepResult {
        rows,
        model_id: String::new(),
        seed: rng.seed(),
        n_repeats,
    })
}

/// Smallest ω at which misclassification reaches `target_pct`, by linear
/// interpolation between the bracketing sweep points.
pub fn threshold_extract(sweep: &SweepResult, target_pct: f64) -> Result<f64> {
    let pcts: Vec<f64> = sweep.rows.iter().map(|r| r.misclassification_pct).collect();
    let min_pct = pcts.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_pct = pcts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hit = pcts.iter().position(|&p| p >= target_pct);
    match hit {
        Some(0) | None => Err(Error::ThresholdNotBracketed {
            target_pct,
            min_pct,
            max_pct,
        }),
        Some(i) => {
            let (w0, p0) = (sweep.rows[i - 1].omega, pcts[i - 1]);
            let (w1, p1) = (sweep.rows[i].omega, pcts[i]);
            Ok(w0 + (target_pct - p0) / (p1 - p0) * (w1 - w0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_two_class, SequenceSample};
    use crate::linalg::Matrix;
    use crate::model::ActivationKind;

    fn mk_sweep(points: &[(f64, f64)]) -> SweepResult {
        SweepResult {
            rows: points
                .iter()
                .map(|&(omega, pct)| SweepRow {
                    omega,
                    misclassification_pct: pct,
                    mc_rho_final: McEstimate {
                        mean: 0.0,
                        std_error: 0.0,
                        samples: 2,
                    },
                })
                .collect(),
            model_id: String::new(),
            seed: 0,
            n_repeats: 1,
        }
    }

    #[test]
    fn threshold_linear_interpolation() {
        let sweep = mk_sweep(&[(0.0, 2.0), (1.0, 8.0)]);
        assert!((threshold_extract(&sweep, 5.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_not_bracketed() {
        let sweep = mk_sweep(&[(0.0, 2.0), (1.0, 8.0)]);
        assert!(matches!(
            threshold_extract(&sweep, 1.0),
            Err(Error::ThresholdNotBracketed { .. })
        ));
        assert!(matches!(
            threshold_extract(&sweep, 50.0),
            Err(Error::ThresholdNotBracketed { .. })
        ));
    }

    fn small_net(seed: u64) -> RnnParams {
        let mut rng = RngState::new(seed);
        RnnParams::init(3, 2, 2, ActivationKind::Tanh, &mut rng)
    }

    #[test]
    fn mc_rho_zero_noise_is_zero() {
        let p = small_net(1);
        let inputs = vec![Vector::from(vec![0.3, -0.1]); 4];
        let noise = NoiseSpec::isotropic(0.0, 2, 3);
        let est = mc_rho(&p, &inputs, &Vector::zeros(3), &noise, 4, 16, &RngState::new(7)).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn mc_rho_deterministic() {
        let p = small_net(2);
        let inputs = vec![Vector::from(vec![0.3, -0.1]); 3];
        let noise = NoiseSpec::isotropic(0.5, 2, 3);
        let a = mc_rho(&p, &inputs, &Vector::zeros(3), &noise, 3, 64, &RngState::new(9)).unwrap();
        let b = mc_rho(&p, &inputs, &Vector::zeros(3), &noise, 3, 64, &RngState::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_omega_zero_matches_clean_error() {
        let mut rng = RngState::new(11);
        let ds = synth_two_class(10, 3, 2, 5.0, &mut rng).unwrap();
        let p = small_net(3);
        let x0 = Vector::zeros(3);
        let mut clean_wrong = 0;
        for s in &ds.samples {
            let SampleLabel::Class(c) = s.label else { unreachable!() };
            if predict_class(&p, &s.inputs, &x0).unwrap() != c {
                clean_wrong += 1;
            }
        }
        let sweep = noise_sweep(&p, &ds, &[0.0], 1, &RngState::new(4)).unwrap();
        let expected = 100.0 * clean_wrong as f64 / ds.len() as f64;
        assert_eq!(sweep.rows[0].misclassification_pct, expected);
        assert_eq!(sweep.rows[0].mc_rho_final.mean, 0.0);
    }

    #[test]
    fn sweep_zero_network_constant_classifier() {
        // A zero network always outputs the zero vector; argmax picks class
        // 0, so balanced two-class data gives exactly 50% misclassification
        // at any omega.
        let p = RnnParams::new(
            Matrix::zeros(3, 3),
            Matrix::zeros(3, 2),
            Vector::zeros(3),
            Matrix::zeros(2, 3),
            Vector::zeros(2),
            ActivationKind::ReLU,
        )
        .unwrap();
        let mut rng = RngState::new(12);
        let ds = synth_two_class(10, 3, 2, 5.0, &mut rng).unwrap();
        let sweep = noise_sweep(&p, &ds, &[0.0, 1.0], 1, &RngState::new(5)).unwrap();
        for row in &sweep.rows {
            assert_eq!(row.misclassification_pct, 50.0);
        }
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let p = small_net(4);
        let ds = Dataset {
            samples: vec![SequenceSample {
                inputs: vec![Vector::zeros(2); 2],
                label: SampleLabel::Class(0),
            }],
            split: crate::data::SplitTag::Test,
            provenance: String::new(),
        };
        assert!(noise_sweep(&p, &ds, &[1.0, 1.0], 1, &RngState::new(0)).is_err());
        assert!(noise_sweep(&p, &ds, &[-0.5, 1.0], 1, &RngState::new(0)).is_err());
        assert!(noise_sweep(&p, &ds, &[], 1, &RngState::new(0)).is_err());
    }
}
