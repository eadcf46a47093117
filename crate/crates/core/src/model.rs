//! The basic recurrent network x_t = σ(A x_{t-1} + B u_t + b),
//! y_t = C x_t + c, its activations, loss functions, and checkpoint format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Matrix, RngState, Vector};

const SPECTRAL_TOL: f64 = 1e-10;
const SPECTRAL_ITERS: usize = 100_000;

/// Pointwise activation with a known Lipschitz constant (κ_σ = 1 for all
/// supported kinds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    ReLU,
    Tanh,
    Identity,
}

impl ActivationKind {
    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    #[inline]
    pub fn apply(&self, h: f64) -> f64 {
        match self {
            ActivationKind::ReLU => h.max(0.0),
            ActivationKind::Tanh => h.tanh(),
            ActivationKind::Identity => h,
        }
    }

    /// σ'(h). The ReLU derivative at 0 is defined as 0 (a valid subgradient
    /// that keeps gating Jacobians deterministic).
    #[inline]
    pub fn derivative(&self, h: f64) -> f64 {
        match self {
            ActivationKind::ReLU => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = h.tanh();
                1.0 - t * t
            }
            ActivationKind::Identity => 1.0,
        }
    }

    /// σ''(h); zero almost everywhere for ReLU and Identity.
    #[inline]
    pub fn second_derivative(&self, h: f64) -> f64 {
        match self {
            ActivationKind::ReLU | ActivationKind::Identity => 0.0,
            ActivationKind::Tanh => {
                let t = h.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::ReLU => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::ReLU),
            "tanh" => Ok(ActivationKind::Tanh),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation {other:?}"))),
        }
    }
}

/// Trainable parameters of the basic RNN.
///
/// `w_hh` is the recurrent matrix (A, n×n), `w_ih` the input matrix (B, n×d),
/// `b_h` the hidden bias (b, n), `w_ho` the output matrix (C, m×n), and
/// `b_o` the output bias (c, m).
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub w_hh: Matrix,
    pub w_ih: Matrix,
    pub b_h: Vector,
    pub w_ho: Matrix,
    pub b_o: Vector,
    pub activation: ActivationKind,
}

impl RnnParams {
    pub fn new(
        w_hh: Matrix,
        w_ih: Matrix,
        b_h: Vector,
        w_ho: Matrix,
        b_o: Vector,
        activation: ActivationKind,
    ) -> Result<Self> {
        let p = RnnParams {
            w_hh,
            w_ih,
            b_h,
            w_ho,
            b_o,
            activation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d, m) = (self.state_dim(), self.input_dim(), self.output_dim());
        if self.w_hh.cols() != n || self.b_h.dim() != n || self.w_ih.rows() != n {
            return Err(Error::DimMismatch("A/B/b state dims disagree".into()));
        }
        if self.w_ho.cols() != n || self.b_o.dim() != m {
            return Err(Error::DimMismatch("C/c output dims disagree".into()));
        }
        let _ = d;
        let finite = self.w_hh.is_finite()
            && self.w_ih.is_finite()
            && self.b_h.is_finite()
            && self.w_ho.is_finite()
            && self.b_o.is_finite();
        if !finite {
            return Err(Error::NonFinite("rnn parameters".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_ho.rows()
    }

    /// Seeded initialization: each weight matrix uniform on
    /// ±√(6/(fan_in+fan_out)), biases zero.
    pub fn init(
        n: usize,
        d: usize,
        m: usize,
        activation: ActivationKind,
        rng: &mut RngState,
    ) -> Self {
        let mut uni = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
        };
        let w_hh = uni(n, n);
        let w_ih = uni(n, d);
        let w_ho = uni(m, n);
        RnnParams {
            w_hh,
            w_ih,
            b_h: Vector::zeros(n),
            w_ho,
            b_o: Vector::zeros(m),
            activation,
        }
    }

    /// (λ, κ_u, κ_G) = (κ_σ‖A‖, κ_σ‖B‖, ‖C‖).
    pub fn lipschitz_constants(&self) -> Result<(f64, f64, f64)> {
        let ks = self.activation.lipschitz();
        let lambda = ks * spectral_norm(&self.w_hh, SPECTRAL_TOL, SPECTRAL_ITERS)?;
        let kappa_u = ks * spectral_norm(&self.w_ih, SPECTRAL_TOL, SPECTRAL_ITERS)?;
        let kappa_g = spectral_norm(&self.w_ho, SPECTRAL_TOL, SPECTRAL_ITERS)?;
        Ok((lambda, kappa_u, kappa_g))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("rnn-checkpoint v1\n");
        writeln!(
            out,
            "dims {} {} {}",
            self.state_dim(),
            self.input_dim(),
            self.output_dim()
        )
        .unwrap();
        writeln!(out, "activation {}", self.activation.name()).unwrap();
        let write_matrix = |out: &mut String, name: &str, m: &Matrix| {
            writeln!(out, "{name}").unwrap();
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        };
        let write_vector = |out: &mut String, name: &str, v: &Vector| {
            writeln!(out, "{name}").unwrap();
            let row: Vec<String> = v.as_slice().iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        };
        write_matrix(&mut out, "A", &self.w_hh);
        write_matrix(&mut out, "B", &self.w_ih);
        write_vector(&mut out, "b", &self.b_h);
        write_matrix(&mut out, "C", &self.w_ho);
        write_vector(&mut out, "c", &self.b_o);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "rnn-checkpoint v1" {
            return Err(Error::Checkpoint(format!("bad header {header:?}")));
        }
        let dims_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing dims".into()))?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| Error::Checkpoint("missing dims".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Checkpoint("bad dims".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Checkpoint("dims must be n d m".into()));
        }
        let (n, d, m) = (dims[0], dims[1], dims[2]);
        let act_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing activation".into()))?;
        let activation = ActivationKind::parse(
            act_line
                .strip_prefix("activation ")
                .ok_or_else(|| Error::Checkpoint("missing activation".into()))?,
        )?;

        let mut read_block = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
            let tag = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
            if tag != name {
                return Err(Error::Checkpoint(format!(
                    "expected block {name}, found {tag:?}"
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("truncated block {name}")))?;
                for tok in line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad number in {name}")))?;
                    data.push(v);
                }
            }
            if data.len() != rows * cols {
                return Err(Error::Checkpoint(format!("block {name} has wrong size")));
            }
            Ok(data)
        };

        let w_hh = Matrix::from_vec(n, n, read_block("A", n, n)?);
        let w_ih = Matrix::from_vec(n, d, read_block("B", n, d)?);
        let b_h = Vector::from(read_block("b", 1, n)?);
        let w_ho = Matrix::from_vec(m, n, read_block("C", m, n)?);
        let b_o = Vector::from(read_block("c", 1, m)?);
        RnnParams::new(w_hh, w_ih, b_h, w_ho, b_o, activation)
    }
}

/// Per-timestep record of one clean forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// u_1..u_T
    pub inputs: Vec<Vector>,
    /// h_t = A x_{t-1} + B u_t + b, t = 1..T
    pub preactivations: Vec<Vector>,
    /// x_0..x_T (states[0] is the initial state)
    pub states: Vec<Vector>,
    /// y_t = C x_t + c, t = 1..T
    pub outputs: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Deterministic forward pass over an input sequence.
pub fn forward(params: &RnnParams, inputs: &[Vector], x0: &Vector) -> Result<Trajectory> {
    let (n, d) = (params.state_dim(), params.input_dim());
    if x0.dim() != n {
        return Err(Error::DimMismatch(format!(
            "x0 dim {} vs state dim {n}",
            x0.dim()
        )));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut preactivations = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    states.push(x0.clone());
    let mut x = x0.clone();
    for u in inputs {
        if u.dim() != d {
            return Err(Error::DimMismatch(format!(
                "input dim {} vs expected {d}",
                u.dim()
            )));
        }
        let mut h = params.w_hh.matvec(&x);
        h.add_scaled(&params.w_ih.matvec(u), 1.0);
        h.add_scaled(&params.b_h, 1.0);
        let xs = Vector::from(h.as_slice().iter().map(|&v| params.activation.apply(v)).collect());
        let mut y = params.w_ho.matvec(&xs);
        y.add_scaled(&params.b_o, 1.0);
        preactivations.push(h);
        outputs.push(y);
        states.push(xs.clone());
        x = xs;
    }
    Ok(Trajectory {
        inputs: inputs.to_vec(),
        preactivations,
        states,
        outputs,
    })
}

/// Loss function family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

/// How per-timestep losses combine over a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Only the final timestep contributes (whole-sequence classification).
    FinalStep,
    /// Sum over all timesteps (time-series prediction).
    SumOverTime,
}

#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Lipschitz constant κ_L of the per-step loss on the relevant range.
    pub lipschitz_kl: f64,
    pub aggregation: Aggregation,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        // Softmax cross-entropy has gradient ‖softmax(y) − e_i‖ ≤ √2.
        LossSpec {
            kind: LossKind::CrossEntropy,
            lipschitz_kl: std::f64::consts::SQRT_2,
            aggregation: Aggregation::FinalStep,
        }
    }

    pub fn mse(lipschitz_kl: f64) -> Self {
        LossSpec {
            kind: LossKind::MeanSquaredError,
            lipschitz_kl,
            aggregation: Aggregation::SumOverTime,
        }
    }
}

/// Target for one timestep's loss.
#[derive(Debug, Clone)]
pub enum LossTarget {
    Class(usize),
    Values(Vector),
}

/// −y[label] + log Σ_j exp(y[j]), computed with a max shift.
pub fn cross_entropy(y: &Vector, label: usize) -> f64 {
    assert!(label < y.dim(), "label out of range");
    let max = y.as_slice().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max
        + y.as_slice()
            .iter()
            .map(|&v| (v - max).exp())
            .sum::<f64>()
            .ln();
    lse - y.as_slice()[label]
}

/// ‖y − target‖².
pub fn mse(y: &Vector, target: &Vector) -> Result<f64> {
    if y.dim() != target.dim() {
        return Err(Error::DimMismatch(format!(
            "mse dims {} vs {}",
            y.dim(),
            target.dim()
        )));
    }
    Ok(y.sub(target).dot(&y.sub(target)))
}

pub fn softmax(y: &Vector) -> Vector {
    let max = y.as_slice().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = y.as_slice().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from(exps.into_iter().map(|e| e / sum).collect())
}

pub fn loss_value(spec: &LossSpec, y: &Vector, target: &LossTarget) -> Result<f64> {
    match (spec.kind, target) {
        (LossKind::CrossEntropy, LossTarget::Class(label)) => Ok(cross_entropy(y, *label)),
        (LossKind::MeanSquaredError, LossTarget::Values(t)) => mse(y, t),
        _ => Err(Error::DimMismatch("loss kind / target mismatch".into())),
    }
}

/// ∂L/∂y for one timestep: softmax(y) − e_label for cross-entropy,
/// 2(y − target) for MSE.
pub fn loss_gradient(spec: &LossSpec, y: &Vector, target: &LossTarget) -> Result<Vector> {
    match (spec.kind, target) {
        (LossKind::CrossEntropy, LossTarget::Class(label)) => {
            assert!(*label < y.dim(), "label out of range");
            let mut g = softmax(y);
            g.as_mut_slice()[*label] -= 1.0;
            Ok(g)
        }
        (LossKind::MeanSquaredError, LossTarget::Values(t)) => {
            if y.dim() != t.dim() {
                return Err(Error::DimMismatch("mse gradient dims".into()));
            }
            Ok(y.sub(t).scale(2.0))
        }
        _ => Err(Error::DimMismatch("loss kind / target mismatch".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(a: f64, b: f64, bias: f64, c: f64, cb: f64, act: ActivationKind) -> RnnParams {
        RnnParams::new(
            Matrix::from_vec(1, 1, vec![a]),
            Matrix::from_vec(1, 1, vec![b]),
            Vector::from(vec![bias]),
            Matrix::from_vec(1, 1, vec![c]),
            Vector::from(vec![cb]),
            act,
        )
        .unwrap()
    }

    #[test]
    fn forward_null_params() {
        let p = scalar_params(0.0, 0.0, 0.0, 0.0, 0.0, ActivationKind::ReLU);
        let inputs = vec![Vector::from(vec![1.0]), Vector::from(vec![-2.0])];
        let traj = forward(&p, &inputs, &Vector::zeros(1)).unwrap();
        for t in 0..2 {
            assert_eq!(traj.states[t + 1].as_slice()[0], 0.0);
            assert_eq!(traj.outputs[t].as_slice()[0], 0.0);
        }
    }

    #[test]
    fn forward_scalar_recurrence() {
        // x_t = 0.5 x_{t-1} + u_t with identity activation.
        let p = scalar_params(0.5, 1.0, 0.0, 1.0, 0.0, ActivationKind::Identity);
        let inputs = vec![Vector::from(vec![1.0]), Vector::from(vec![1.0])];
        let traj = forward(&p, &inputs, &Vector::zeros(1)).unwrap();
        assert!((traj.states[1].as_slice()[0] - 1.0).abs() < 1e-15);
        assert!((traj.states[2].as_slice()[0] - 1.5).abs() < 1e-15);
        assert!((traj.outputs[0].as_slice()[0] - 1.0).abs() < 1e-15);
        assert!((traj.outputs[1].as_slice()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn forward_relu_dead_region() {
        let p = scalar_params(1.0, 1.0, -10.0, 1.0, 0.25, ActivationKind::ReLU);
        let traj = forward(&p, &[Vector::from(vec![1.0])], &Vector::zeros(1)).unwrap();
        assert_eq!(traj.preactivations[0].as_slice()[0], -9.0);
        assert_eq!(traj.states[1].as_slice()[0], 0.0);
        assert_eq!(traj.outputs[0].as_slice()[0], 0.25);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let p = scalar_params(1.0, 1.0, 0.0, 1.0, 0.0, ActivationKind::ReLU);
        assert!(forward(&p, &[Vector::zeros(2)], &Vector::zeros(1)).is_err());
        assert!(forward(&p, &[Vector::zeros(1)], &Vector::zeros(3)).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let y = Vector::zeros(10);
        assert!((cross_entropy(&y, 3) - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logit() {
        let y = Vector::from(vec![1000.0, 0.0]);
        let v = cross_entropy(&y, 0);
        assert!(v.is_finite());
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let y = Vector::from(vec![0.3, -1.2, 2.5, 0.0, -0.7]);
        let shifted = Vector::from(y.as_slice().iter().map(|v| v + 13.7).collect());
        assert!((cross_entropy(&y, 2) - cross_entropy(&shifted, 2)).abs() < 1e-9);
    }

    #[test]
    fn mse_basics() {
        let y = Vector::from(vec![1.0, 2.0]);
        let t = Vector::zeros(2);
        assert_eq!(mse(&y, &t).unwrap(), 5.0);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert!(mse(&y, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn loss_gradient_uniform_softmax() {
        let spec = LossSpec::cross_entropy();
        let g = loss_gradient(&spec, &Vector::zeros(2), &LossTarget::Class(0)).unwrap();
        assert!((g.as_slice()[0] + 0.5).abs() < 1e-12);
        assert!((g.as_slice()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_mse_at_target() {
        let spec = LossSpec::mse(1.0);
        let y = Vector::from(vec![0.4, -0.2]);
        let g = loss_gradient(&spec, &y, &LossTarget::Values(y.clone())).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn lipschitz_constants_diagonal() {
        let p = RnnParams::new(
            Matrix::identity(2).scale(0.5),
            Matrix::identity(2),
            Vector::zeros(2),
            Matrix::identity(2).scale(2.0),
            Vector::zeros(2),
            ActivationKind::ReLU,
        )
        .unwrap();
        let (l, ku, kg) = p.lipschitz_constants().unwrap();
        assert!((l - 0.5).abs() < 1e-8);
        assert!((ku - 1.0).abs() < 1e-8);
        assert!((kg - 2.0).abs() < 1e-8);
    }

    #[test]
    fn lipschitz_constants_zero() {
        let p = scalar_params(0.0, 0.0, 0.0, 0.0, 0.0, ActivationKind::Tanh);
        let (l, ku, kg) = p.lipschitz_constants().unwrap();
        assert_eq!((l, ku, kg), (0.0, 0.0, 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = RngState::new(4);
        let p = RnnParams::init(3, 2, 4, ActivationKind::Tanh, &mut rng);
        let dir = std::env::temp_dir().join("rnn_robust_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        p.save(&path).unwrap();
        let q = RnnParams::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_bad_header() {
        let dir = std::env::temp_dir().join("rnn_robust_ckpt_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ckpt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(matches!(RnnParams::load(&path), Err(Error::Checkpoint(_))));
    }
}
