//! Training in four regimes: regular, stable (singular values of the
//! recurrent matrix clipped to 1 after every update), covariance-estimator
//! regularized, and upper-bound regularized. Includes backpropagation
//! through time and the adjoint of the covariance recursion.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{Dataset, SampleLabel, SequenceSample};
use crate::error::{Error, Result};
use crate::linalg::{
    clip_singular_values, spectral_norm, top_singular_pair, Matrix, RngState, Vector,
};
use crate::model::{
    forward, loss_gradient, loss_value, Aggregation, LossSpec, LossTarget, RnnParams, Trajectory,
};
use crate::robustness::NoiseSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Regular,
    Stable,
    EstimatorReg,
    UpperBoundReg,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Regular => "regular",
            Regime::Stable => "stable",
            Regime::EstimatorReg => "estimator",
            Regime::UpperBoundReg => "upperbound",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Regime::Regular),
            "stable" => Ok(Regime::Stable),
            "estimator" => Ok(Regime::EstimatorReg),
            "upperbound" => Ok(Regime::UpperBoundReg),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

/// How the upper-bound regularizer weight μ/N_e is read: divided by the
/// current (1-based) epoch index, giving a decaying weight, or by the total
/// epoch count, giving a constant weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuSchedule {
    CurrentEpoch,
    TotalEpochs,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Regularization weight μ ≥ 0.
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Momentum coefficient in [0, 1).
    pub momentum: f64,
    pub seed: u64,
    /// Optional global-norm gradient clip.
    pub gradient_clip_norm: Option<f64>,
    /// Noise model the regularizers train against.
    pub noise: NoiseSpec,
    pub mu_schedule: MuSchedule,
    pub loss: LossSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu < 0.0 {
            return Err(Error::Config("mu must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.step_size < 0.0 {
            return Err(Error::Config("step_size must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Gradients matching the shapes of `RnnParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_w_hh: Matrix,
    pub d_w_ih: Matrix,
    pub d_b_h: Vector,
    pub d_w_ho: Matrix,
    pub d_b_o: Vector,
}

impl GradientSet {
    pub fn zeros_like(params: &RnnParams) -> Self {
        GradientSet {
            d_w_hh: Matrix::zeros(params.state_dim(), params.state_dim()),
            d_w_ih: Matrix::zeros(params.state_dim(), params.input_dim()),
            d_b_h: Vector::zeros(params.state_dim()),
            d_w_ho: Matrix::zeros(params.output_dim(), params.state_dim()),
            d_b_o: Vector::zeros(params.output_dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) {
        self.d_w_hh.add_scaled(&other.d_w_hh, s);
        self.d_w_ih.add_scaled(&other.d_w_ih, s);
        self.d_b_h.add_scaled(&other.d_b_h, s);
        self.d_w_ho.add_scaled(&other.d_w_ho, s);
        self.d_b_o.add_scaled(&other.d_b_o, s);
    }

    pub fn scale_mut(&mut self, s: f64) {
        self.d_w_hh = self.d_w_hh.scale(s);
        self.d_w_ih = self.d_w_ih.scale(s);
        self.d_b_h = self.d_b_h.scale(s);
        self.d_w_ho = self.d_w_ho.scale(s);
        self.d_b_o = self.d_b_o.scale(s);
    }

    pub fn global_norm(&self) -> f64 {
        let sq = |m: &Matrix| m.as_slice().iter().map(|v| v * v).sum::<f64>();
        let sqv = |v: &Vector| v.as_slice().iter().map(|x| x * x).sum::<f64>();
        (sq(&self.d_w_hh) + sq(&self.d_w_ih) + sqv(&self.d_b_h) + sq(&self.d_w_ho) + sqv(&self.d_b_o))
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.d_w_hh.is_finite()
            && self.d_w_ih.is_finite()
            && self.d_b_h.is_finite()
            && self.d_w_ho.is_finite()
            && self.d_b_o.is_finite()
    }
}

/// Per-timestep loss target for a sample under a given aggregation mode.
fn step_target(
    spec: &LossSpec,
    label: &SampleLabel,
    t: usize,
    seq_len: usize,
) -> Result<Option<LossTarget>> {
    let is_final = t == seq_len;
    match (spec.aggregation, label) {
        (Aggregation::FinalStep, SampleLabel::Class(c)) => {
            Ok(is_final.then(|| LossTarget::Class(*c)))
        }
        (Aggregation::FinalStep, SampleLabel::Sequence(seq)) => Ok(is_final
            .then(|| LossTarget::Values(seq.last().expect("empty target sequence").clone()))),
        (Aggregation::SumOverTime, SampleLabel::Class(c)) => Ok(Some(LossTarget::Class(*c))),
        (Aggregation::SumOverTime, SampleLabel::Sequence(seq)) => {
            if seq.len() != seq_len {
                return Err(Error::DimMismatch("target sequence length".into()));
            }
            Ok(Some(LossTarget::Values(seq[t - 1].clone())))
        }
    }
}

/// Total (unregularized) loss of a trajectory.
pub fn sequence_loss(spec: &LossSpec, traj: &Trajectory, label: &SampleLabel) -> Result<f64> {
    let seq_len = traj.len();
    let mut total = 0.0;
    for t in 1..=seq_len {
        if let Some(target) = step_target(spec, label, t, seq_len)? {
            total += loss_value(spec, &traj.outputs[t - 1], &target)?;
        }
    }
    Ok(total)
}

/// Exact reverse-mode gradient of the sequence loss through the unrolled
/// recurrence. The adjoint flows as δ_{t-1} = Aᵀ(σ'(h_t) ⊙ δ̄_t) with δ̄_t
/// the post-activation adjoint.
pub fn bptt_loss_grad(
    params: &RnnParams,
    traj: &Trajectory,
    spec: &LossSpec,
    label: &SampleLabel,
) -> Result<GradientSet> {
    let seq_len = traj.len();
    let mut g = GradientSet::zeros_like(params);
    let mut gx = Vector::zeros(params.state_dim());
    for t in (1..=seq_len).rev() {
        if let Some(target) = step_target(spec, label, t, seq_len)? {
            let gy = loss_gradient(spec, &traj.outputs[t - 1], &target)?;
            g.d_w_ho.add_scaled(&Matrix::outer(&gy, &traj.states[t]), 1.0);
            g.d_b_o.add_scaled(&gy, 1.0);
            gx.add_scaled(&params.w_ho.matvec_t(&gy), 1.0);
        }
        let h = &traj.preactivations[t - 1];
        let mut ah = gx.clone();
        for (a, &hv) in ah.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *a *= params.activation.derivative(hv);
        }
        g.d_w_hh.add_scaled(&Matrix::outer(&ah, &traj.states[t - 1]), 1.0);
        g.d_w_ih.add_scaled(&Matrix::outer(&ah, &traj.inputs[t - 1]), 1.0);
        g.d_b_h.add_scaled(&ah, 1.0);
        gx = params.w_hh.matvec_t(&ah);
    }
    Ok(g)
}

/// Σ_t Tr(R̂_t) along a trajectory, using the raw covariance recursion
/// (symmetrization only, no eigenvalue flooring, so the value is exactly the
/// function the gradient below differentiates).
pub fn covariance_reg_value(
    params: &RnnParams,
    traj: &Trajectory,
    noise: &NoiseSpec,
) -> Result<f64> {
    Ok(covariance_reg_forward(params, traj, noise)?.value)
}

/// Gradient of Σ_t Tr(R̂_t) through the coupled {h_t, x_t, P̂_t} recursions,
/// including the dependence of the gating diag(σ'(h_t)) on the parameters
/// (the σ'' chain; identically zero for ReLU and Identity).
pub fn covariance_reg_grad(
    params: &RnnParams,
    traj: &Trajectory,
    noise: &NoiseSpec,
) -> Result<GradientSet> {
    Ok(covariance_reg_value_grad_opts(params, traj, noise, true)?.1)
}

/// As `covariance_reg_grad` but also returns the regularizer value, and with
/// the σ'' curvature term optionally ablated (used as a negative control in
/// gradient checks; ablation is wrong for Tanh).
pub fn covariance_reg_value_grad_opts(
    params: &RnnParams,
    traj: &Trajectory,
    noise: &NoiseSpec,
    include_curvature: bool,
) -> Result<(f64, GradientSet)> {
    let fwd = covariance_reg_forward(params, traj, noise)?;
    let seq_len = traj.len();
    let n = params.state_dim();
    let mut g = GradientSet::zeros_like(params);

    // dC = Σ_t 2 C P̂_t = 2 C (Σ_t P̂_t).
    g.d_w_ho = params.w_ho.matmul(&fwd.p_sum).scale(2.0);

    let m = params.w_ho.matmul_tn(&params.w_ho); // CᵀC
    let mut s = m.clone(); // S_T
    let mut ah_direct: Vec<Option<Vector>> = vec![None; seq_len + 1];
    let curvature_active = include_curvature
        && matches!(params.activation, crate::model::ActivationKind::Tanh);

    for t in (1..=seq_len).rev() {
        let j = &fwd.jac_x[t - 1];
        let k = &fwd.jac_u[t - 1];
        let p_prev = &fwd.p[t - 1];
        // Ĵ = ∂L/∂J_t = 2 S_t J_t P̂_{t-1}; computed as ((J P)ᵀ S)ᵀ so the
        // zero rows of the gated Jacobian are skipped.
        let jp = j.matmul(p_prev);
        let jhat = jp.matmul_tn(&s).transpose().scale(2.0);
        let ks = k.matmul(noise.sigma_at(t));
        let khat = ks.matmul_tn(&s).transpose().scale(2.0);

        // dA += D_t Ĵ, dB += D_t K̂.
        let gate = &fwd.gates[t - 1];
        for i in 0..n {
            let gi = gate[i];
            if gi == 0.0 {
                continue;
            }
            for (dst, &src) in g.d_w_hh.row_mut(i).iter_mut().zip(jhat.row(i)) {
                *dst += gi * src;
            }
            for (dst, &src) in g.d_w_ih.row_mut(i).iter_mut().zip(khat.row(i)) {
                *dst += gi * src;
            }
        }

        if curvature_active {
            let h = &traj.preactivations[t - 1];
            let mut ah = Vector::zeros(n);
            for i in 0..n {
                let gd = dot(jhat.row(i), params.w_hh.row(i))
                    + dot(khat.row(i), params.w_ih.row(i));
                ah.as_mut_slice()[i] =
                    params.activation.second_derivative(h.as_slice()[i]) * gd;
            }
            ah_direct[t] = Some(ah);
        }

        if t > 1 {
            // S_{t-1} = M + J_tᵀ S_t J_t.
            let jts = j.matmul_tn(&s);
            let mut s_next = jts.matmul(j);
            s_next.add_scaled(&m, 1.0);
            s_next.symmetrize();
            s = s_next;
        }
    }

    if curvature_active {
        // The gating depends on h_t, which depends on (A, B, b) and on the
        // earlier states; run the usual BPTT chain seeded by the direct
        // h-adjoints.
        let mut gx = Vector::zeros(n);
        for t in (1..=seq_len).rev() {
            let h = &traj.preactivations[t - 1];
            let mut ah = match ah_direct[t].take() {
                Some(v) => v,
                None => Vector::zeros(n),
            };
            // gx arrives as an x_t adjoint; gate it down to h_t.
            let mut gated = gx.clone();
            for (gv, &hv) in gated.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *gv *= params.activation.derivative(hv);
            }
            ah.add_scaled(&gated, 1.0);
            g.d_w_hh.add_scaled(&Matrix::outer(&ah, &traj.states[t - 1]), 1.0);
            g.d_w_ih.add_scaled(&Matrix::outer(&ah, &traj.inputs[t - 1]), 1.0);
            g.d_b_h.add_scaled(&ah, 1.0);
            gx = params.w_hh.matvec_t(&ah);
        }
    }

    Ok((fwd.value, g))
}

struct CovForward {
    /// P̂_0..P̂_T.
    p: Vec<Matrix>,
    p_sum: Matrix,
    jac_x: Vec<Matrix>,
    jac_u: Vec<Matrix>,
    gates: Vec<Vec<f64>>,
    value: f64,
}

fn covariance_reg_forward(
    params: &RnnParams,
    traj: &Trajectory,
    noise: &NoiseSpec,
) -> Result<CovForward> {
    let n = params.state_dim();
    if noise.init_cov.rows() != n {
        return Err(Error::DimMismatch("init_cov dims".into()));
    }
    let m = params.w_ho.matmul_tn(&params.w_ho);
    let seq_len = traj.len();
    let mut p = Vec::with_capacity(seq_len + 1);
    let mut jac_x = Vec::with_capacity(seq_len);
    let mut jac_u = Vec::with_capacity(seq_len);
    let mut gates = Vec::with_capacity(seq_len);
    let mut p_sum = Matrix::zeros(n, n);
    let mut value = 0.0;
    let mut p0 = noise.init_cov.clone();
    p0.symmetrize();
    p.push(p0);
    for t in 1..=seq_len {
        let h = &traj.preactivations[t - 1];
        let gate: Vec<f64> = h
            .as_slice()
            .iter()
            .map(|&v| params.activation.derivative(v))
            .collect();
        let j = params.w_hh.scale_rows(&gate);
        let k = params.w_ih.scale_rows(&gate);
        let mut pt = j.congruence(&p[t - 1]);
        pt.add_scaled(&k.congruence(noise.sigma_at(t)), 1.0);
        pt.symmetrize();
        value += mat_dot(&m, &pt); // Tr(M P̂_t)
        p_sum.add_scaled(&pt, 1.0);
        p.push(pt);
        jac_x.push(j);
        jac_u.push(k);
        gates.push(gate);
    }
    Ok(CovForward {
        p,
        p_sum,
        jac_x,
        jac_u,
        gates,
        value,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tr(AᵀB) = Σ_ij A_ij B_ij; equals Tr(AB) for symmetric A.
fn mat_dot(a: &Matrix, b: &Matrix) -> f64 {
    dot(a.as_slice(), b.as_slice())
}

/// Σ_{t=1}^{horizon} Ω_t with Ω_t the basic-RNN bound
/// ‖C‖²(‖A‖^{2t}Tr(Γ) + Σ_{i=0}^{t-1}‖A‖^{2i}‖B‖²Tr(Σ_{t-i})).
pub fn upper_bound_reg_value(
    params: &RnnParams,
    noise: &NoiseSpec,
    t_horizon: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 1..=t_horizon {
        total += crate::robustness::upper_bound_basic(params, noise, t)?;
    }
    Ok(total)
}

fn top_pair_robust(m: &Matrix) -> Result<(f64, Vector, Vector, bool)> {
    match top_singular_pair(m, 1e-10, 5_000) {
        Ok((s, u, v)) => Ok((s, u, v, false)),
        // Slow convergence signals a (near-)tied top singular value; any
        // vector in the top subspace is still a valid subgradient direction,
        // so progressively looser residual tolerances are acceptable. A
        // gap of ε caps the stall residual near ε·σ, so the 1e-4 rung
        // terminates in practice for any spectrum.
        Err(Error::NonConvergence { .. }) => match top_singular_pair(m, 1e-6, 50_000) {
            Ok((s, u, v)) => Ok((s, u, v, true)),
            Err(Error::NonConvergence { .. }) => {
                let (s, u, v) = top_singular_pair(m, 1e-4, 50_000)?;
                Ok((s, u, v, true))
            }
            Err(e) => Err(e),
        },
        Err(e) => Err(e),
    }
}

/// Subgradient of (μ/epoch)·Σ_{t=1}^{horizon} Ω_t with respect to (A, B, C),
/// using d‖M‖/dM = u₁v₁ᵀ. Biases do not enter Ω, so db = dc = 0. The
/// returned flag is true when a top singular pair looked degenerate.
pub fn upper_bound_reg_grad(
    params: &RnnParams,
    noise: &NoiseSpec,
    t_horizon: usize,
    epoch: usize,
    mu: f64,
) -> Result<(GradientSet, bool)> {
    assert!(epoch >= 1, "epoch index is 1-based");
    let mut g = GradientSet::zeros_like(params);
    if mu == 0.0 {
        return Ok((g, false));
    }
    let (a, ua, va, dega) = top_pair_robust(&params.w_hh)?;
    let (b, ub, vb, degb) = top_pair_robust(&params.w_ih)?;
    let (c, uc, vc, degc) = top_pair_robust(&params.w_ho)?;
    let degenerate = dega || degb || degc;

    let tr_gamma = noise.init_cov.trace();
    // gamma_sum   = Σ_t a^{2t},      d/da = Σ_t 2t a^{2t-1}
    // noise_sum   = Σ_t Σ_i a^{2i} Tr(Σ_{t-i}),  d/da = Σ_t Σ_i 2i a^{2i-1} ...
    let mut gamma_sum = 0.0;
    let mut gamma_sum_da = 0.0;
    let mut noise_sum = 0.0;
    let mut noise_sum_da = 0.0;
    for t in 1..=t_horizon {
        gamma_sum += a.powi(2 * t as i32);
        gamma_sum_da += 2.0 * t as f64 * a.powi(2 * t as i32 - 1);
        for i in 0..t {
            let tr_sigma = noise.sigma_at(t - i).trace();
            noise_sum += a.powi(2 * i as i32) * tr_sigma;
            if i > 0 {
                noise_sum_da += 2.0 * i as f64 * a.powi(2 * i as i32 - 1) * tr_sigma;
            }
        }
    }

    let c2 = c * c;
    let d_da = c2 * (tr_gamma * gamma_sum_da + b * b * noise_sum_da);
    let d_db = c2 * 2.0 * b * noise_sum;
    let d_dc = 2.0 * c * (tr_gamma * gamma_sum + b * b * noise_sum);

    let w = mu / epoch as f64;
    g.d_w_hh.add_scaled(&Matrix::outer(&ua, &va), w * d_da);
    g.d_w_ih.add_scaled(&Matrix::outer(&ub, &vb), w * d_db);
    g.d_w_ho.add_scaled(&Matrix::outer(&uc, &vc), w * d_dc);
    Ok((g, degenerate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub regularizer: f64,
    pub spec_norm_a: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub diverged_at: Option<usize>,
}

impl TrainLog {
    /// One CSV row per epoch. Wall time is deliberately not a column so that
    /// re-runs with the same seed produce byte-identical tables; it lives in
    /// the run manifest instead.
    pub fn to_table(&self) -> String {
        let mut out =
            String::from("epoch,train_loss,test_loss,test_accuracy,regularizer,spec_norm_a\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{:.12e},{:.12e},{:.6},{:.12e},{:.12e}",
                r.epoch, r.train_loss, r.test_loss, r.test_accuracy, r.regularizer, r.spec_norm_a
            )
            .unwrap();
        }
        out
    }
}

fn sample_target_as_label(sample: &SequenceSample) -> &SampleLabel {
    &sample.label
}

/// Per-sample loss-plus-regularizer gradient for one parameter snapshot.
fn sample_grad(
    params: &RnnParams,
    sample: &SequenceSample,
    cfg: &TrainConfig,
    x0: &Vector,
) -> Result<(f64, f64, GradientSet)> {
    let traj = forward(params, &sample.inputs, x0)?;
    let label = sample_target_as_label(sample);
    let loss = sequence_loss(&cfg.loss, &traj, label)?;
    let mut grad = bptt_loss_grad(params, &traj, &cfg.loss, label)?;
    let mut reg = 0.0;
    if cfg.regime == Regime::EstimatorReg && cfg.mu > 0.0 {
        let (value, cov_grad) = covariance_reg_value_grad_opts(params, &traj, &cfg.noise, true)?;
        grad.add_scaled(&cov_grad, cfg.mu);
        reg = value;
    }
    Ok((loss, reg, grad))
}

fn evaluate(
    params: &RnnParams,
    dataset: &Dataset,
    spec: &LossSpec,
    x0: &Vector,
) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, bool)>> = dataset
        .samples
        .par_iter()
        .map(|sample| {
            let traj = forward(params, &sample.inputs, x0)?;
            let loss = sequence_loss(spec, &traj, &sample.label)?;
            let correct = match &sample.label {
                SampleLabel::Class(c) => {
                    crate::eval::argmax(traj.outputs.last().expect("empty trajectory")) == *c
                }
                SampleLabel::Sequence(_) => false,
            };
            Ok((loss, correct))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (l, c) = r?;
        loss_sum += l;
        if c {
            correct += 1;
        }
    }
    let count = dataset.len() as f64;
    Ok((loss_sum / count, correct as f64 / count))
}

/// Mini-batch SGD with momentum over the configured regime.
///
/// Deterministic for a fixed (seed, config, dataset): batch order comes from
/// the seeded shuffle and gradient accumulation follows sample-index order.
/// On divergence (non-finite loss) training aborts and the last epoch-end
/// parameters are returned with `diverged_at` set in the log.
pub fn train(
    params0: &RnnParams,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(RnnParams, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    params0.validate()?;
    let x0 = Vector::zeros(params0.state_dim());
    let mut params = params0.clone();
    let mut last_good = params.clone();
    let mut velocity = GradientSet::zeros_like(&params);
    let mut rng = RngState::new(cfg.seed);
    let mut log = TrainLog::default();
    let seq_len = train_set.seq_len();

    'epochs: for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        let eff_epoch = match cfg.mu_schedule {
            MuSchedule::CurrentEpoch => epoch,
            MuSchedule::TotalEpochs => cfg.epochs,
        };

        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<Result<(f64, f64, GradientSet)>> = batch
                .par_iter()
                .map(|&i| sample_grad(&params, &train_set.samples[i], cfg, &x0))
                .collect();

            let mut grad = GradientSet::zeros_like(&params);
            let mut batch_loss = 0.0;
            for r in per_sample {
                let (loss, reg, g) = r?;
                batch_loss += loss;
                reg_sum += reg;
                grad.add_scaled(&g, 1.0);
            }
            let bl = batch.len() as f64;
            grad.scale_mut(1.0 / bl);
            batch_loss /= bl;
            loss_sum += batch_loss * bl;

            if cfg.regime == Regime::UpperBoundReg && cfg.mu > 0.0 {
                let (ub_grad, _degenerate) =
                    upper_bound_reg_grad(&params, &cfg.noise, seq_len, eff_epoch, cfg.mu)?;
                grad.add_scaled(&ub_grad, 1.0);
            }

            if !batch_loss.is_finite() || !grad.is_finite() {
                log.diverged_at = Some(epoch);
                break 'epochs;
            }

            if let Some(cap) = cfg.gradient_clip_norm {
                let norm = grad.global_norm();
                if norm > cap {
                    grad.scale_mut(cap / norm);
                }
            }

            velocity.scale_mut(cfg.momentum);
            velocity.add_scaled(&grad, 1.0);
            params.w_hh.add_scaled(&velocity.d_w_hh, -cfg.step_size);
            params.w_ih.add_scaled(&velocity.d_w_ih, -cfg.step_size);
            params.b_h.add_scaled(&velocity.d_b_h, -cfg.step_size);
            params.w_ho.add_scaled(&velocity.d_w_ho, -cfg.step_size);
            params.b_o.add_scaled(&velocity.d_b_o, -cfg.step_size);

            if cfg.regime == Regime::Stable {
                params.w_hh = clip_singular_values(&params.w_hh, 1.0)?;
            }
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let (test_loss, test_accuracy) = match test_set {
            Some(ts) if !ts.is_empty() => evaluate(&params, ts, &cfg.loss, &x0)?,
            _ => (f64::NAN, f64::NAN),
        };
        let regularizer = match cfg.regime {
            Regime::EstimatorReg => reg_sum / train_set.len() as f64,
            Regime::UpperBoundReg => upper_bound_reg_value(&params, &cfg.noise, seq_len)?,
            _ => 0.0,
        };
        let spec_norm_a = spectral_norm(&params.w_hh, 1e-8, 100_000)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            test_loss,
            test_accuracy,
            regularizer,
            spec_norm_a,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        last_good = params.clone();
    }

    if log.diverged_at.is_some() {
        return Ok((last_good, log));
    }
    Ok((params, log))
}
