//! Throwaway calibration probes (ignored by default).
use rnn_robust::data::{load_idx, Dataset};
use rnn_robust::eval::noise_sweep;
use rnn_robust::train::{train, MuSchedule, Regime, TrainConfig};
use rnn_robust::{ActivationKind, LossSpec, NoiseSpec, RngState, RnnParams};

struct Phase {
    epochs: usize,
    step: f64,
    momentum: f64,
    batch: usize,
    clip: f64,
}

fn ph(epochs: usize, step: f64, momentum: f64, batch: usize) -> Phase {
    Phase { epochs, step, momentum, batch, clip: 1.0 }
}

fn phc(epochs: usize, step: f64, momentum: f64, batch: usize, clip: f64) -> Phase {
    Phase { epochs, step, momentum, batch, clip }
}

fn data() -> (Dataset, Dataset) {
    (
        load_idx(
            "/root/crate/data/train-images-idx3-ubyte".as_ref(),
            "/root/crate/data/train-labels-idx1-ubyte".as_ref(),
        )
        .unwrap(),
        load_idx(
            "/root/crate/data/test-images-idx3-ubyte".as_ref(),
            "/root/crate/data/test-labels-idx1-ubyte".as_ref(),
        )
        .unwrap(),
    )
}

fn run_phases(tag: &str, regime: Regime, mu: f64, phases: &[Phase]) {
    let (train_set, test_set) = data();
    let mut rng = RngState::new(1).split(0x1417);
    let mut params = RnnParams::init(60, 28, 10, ActivationKind::ReLU, &mut rng);
    for (i, p) in phases.iter().enumerate() {
        let c = TrainConfig {
            regime,
            mu,
            epochs: p.epochs,
            batch_size: p.batch,
            step_size: p.step,
            momentum: p.momentum,
            seed: 1 + i as u64,
            gradient_clip_norm: Some(p.clip),
            noise: NoiseSpec::isotropic(1.0, 28, 60),
            mu_schedule: MuSchedule::CurrentEpoch,
            loss: LossSpec::cross_entropy(),
        };
        let (np, log) = train(&params, &train_set, Some(&test_set), &c).unwrap();
        params = np;
        let last = log.records.last().unwrap();
        println!(
            "[{tag}] phase {i} (ep {} step {} mom {} b{}): acc {:.4} loss {:.4} |A| {:.3}",
            p.epochs, p.step, p.momentum, p.batch, last.test_accuracy, last.test_loss,
            last.spec_norm_a
        );
    }
    let omegas = [0.0, 0.25, 0.5, 1.0];
    let sweep = noise_sweep(&params, &test_set, &omegas, 1, &RngState::new(1)).unwrap();
    for r in &sweep.rows {
        println!("[{tag}] sweep w={:.2} miscls={:.2}%", r.omega, r.misclassification_pct);
    }
}

const KP: [(usize, f64, f64); 3] = [(40, 0.015, 0.90), (20, 0.005, 0.95), (25, 0.0015, 0.95)];

fn kphases() -> Vec<Phase> {
    KP.iter().map(|&(e, s, m)| ph(e, s, m, 32)).collect()
}

#[test]
#[ignore]
fn stable_k() {
    run_phases("stable_k", Regime::Stable, 0.0, &kphases());
}

#[test]
#[ignore]
fn ub_k() {
    run_phases("ub_k", Regime::UpperBoundReg, 1e-7, &kphases());
}

#[test]
#[ignore]
fn est_k() {
    run_phases("est_k", Regime::EstimatorReg, 1e-4, &kphases());
}

#[test]
#[ignore]
fn est_k2() {
    run_phases("est_k2", Regime::EstimatorReg, 7e-5, &kphases());
}

#[test]
#[ignore]
fn reg_k() {
    run_phases("reg_k", Regime::Regular, 0.0, &kphases());
}
