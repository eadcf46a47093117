//! Property-based invariants over randomized inputs.

mod common;

use common::*;
use proptest::prelude::*;
use rnn_robust::linalg::{clip_singular_values, spectral_norm};
use rnn_robust::model::forward;
use rnn_robust::robustness::covariance_step;
use rnn_robust::{ActivationKind, Matrix, RngState, RnnParams, Vector};

fn arb_matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-3.0..3.0f64, r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_norm_transpose_symmetric(m in arb_matrix(6)) {
        let a = spectral_norm(&m, 1e-10, 100_000).unwrap();
        let b = spectral_norm(&m.transpose(), 1e-10, 100_000).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
    }

    #[test]
    fn clip_respects_cap(m in arb_matrix(6), cap in 0.1..4.0f64) {
        let clipped = clip_singular_values(&m, cap).unwrap();
        let norm = spectral_norm(&clipped, 1e-10, 100_000).unwrap();
        prop_assert!(norm <= cap + 1e-6);
    }

    #[test]
    fn clip_is_noop_within_cap(m in arb_matrix(5)) {
        let norm = spectral_norm(&m, 1e-10, 100_000).unwrap();
        let clipped = clip_singular_values(&m, norm + 1.0).unwrap();
        prop_assert!(clipped.sub(&m).max_abs() <= 1e-8);
    }

    #[test]
    fn covariance_step_preserves_psd(seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let params = random_params(4, 3, 2, ActivationKind::Tanh, 1.0, &mut rng);
        let p_prev = random_psd(4, &mut rng);
        let sigma = random_psd(3, &mut rng);
        let h = Vector::from((0..4).map(|_| rng.standard_normal()).collect::<Vec<_>>());
        let p = covariance_step(&params, &h, &p_prev, &sigma).unwrap();
        let min_eig = *oracle_symmetric_eigenvalues(&p).last().unwrap();
        let scale = p.max_abs().max(1.0);
        prop_assert!(min_eig >= -1e-9 * scale, "min eig {min_eig}");
    }

    #[test]
    fn checkpoint_round_trip_exact(seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let params = random_params(4, 3, 2, ActivationKind::ReLU, 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        params.save(&path).unwrap();
        let back = RnnParams::load(&path).unwrap();
        prop_assert!(back == params);
    }

    /// Identity-activation forward pass equals the explicit affine recursion.
    #[test]
    fn linear_forward_is_exact(seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let params = random_params(3, 2, 2, ActivationKind::Identity, 0.8, &mut rng);
        let inputs = random_inputs(5, 2, &mut rng);
        let x0 = Vector::from((0..3).map(|_| rng.standard_normal()).collect::<Vec<_>>());
        let traj = forward(&params, &inputs, &x0).unwrap();
        let mut x = x0.clone();
        for (t, u) in inputs.iter().enumerate() {
            let mut next = params.w_hh.matvec(&x);
            next.add_scaled(&params.w_ih.matvec(u), 1.0);
            next.add_scaled(&params.b_h, 1.0);
            x = next;
            prop_assert!(traj.states[t + 1].sub(&x).norm() <= 1e-12);
        }
    }

    #[test]
    fn rng_split_streams_are_stable(seed in 0u64..1000, idx in 0u64..64) {
        let mut a = RngState::new(seed).split(idx);
        let mut b = RngState::new(seed).split(idx);
        for _ in 0..16 {
            prop_assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }
}
