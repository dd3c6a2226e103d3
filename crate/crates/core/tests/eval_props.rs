use dds_core::eval::d_os_from_log_likelihoods;
use dds_core::{calibrate_threshold, confusion_matrix, frame_f1, FlowArch, FlowModel, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn activity(seed: u64, k: usize, t: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..k * t).map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
    // a noisy score that is correlated with the truth, with deliberate ties
    let h: Vec<f64> = truth
        .iter()
        .map(|&y| ((y * 0.5 + rng.random_range(0.0..0.8)) * 8.0).round() / 8.0)
        .collect();
    (Tensor::matrix(k, t, h), Tensor::matrix(k, t, truth))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn d_os_depends_only_on_order(own in prop::collection::vec(-50.0f64..50.0, 1..30),
                                  other in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let base = d_os_from_log_likelihoods(&own, &other).unwrap();
        let f = |v: f64| (v / 10.0).exp() * 3.0 - 7.0;
        let own_t: Vec<f64> = own.iter().map(|&v| f(v)).collect();
        let other_t: Vec<f64> = other.iter().map(|&v| f(v)).collect();
        prop_assert_eq!(base, d_os_from_log_likelihoods(&own_t, &other_t).unwrap());
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn calibration_is_self_consistent_and_optimal(seed in any::<u64>(), k in 1usize..5, t in 1usize..20) {
        let (h, truth) = activity(seed, k, t);
        let best = calibrate_threshold(&h, &truth).unwrap();
        prop_assert_eq!(best, frame_f1(&h, &truth, best.threshold).unwrap());
        let mut values: Vec<f64> = h.data().to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let (lo, hi) = (values[0], values[values.len() - 1]);
        let mut candidates = vec![lo - lo.abs().max(1.0), hi + hi.abs().max(1.0)];
        candidates.extend(values.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        for th in candidates {
            let r = frame_f1(&h, &truth, th).unwrap();
            prop_assert!(r.f1 <= best.f1);
            if r.f1 == best.f1 {
                prop_assert!(th <= best.threshold);
            }
        }
    }

    #[test]
    fn f1_ignores_row_order(seed in any::<u64>(), k in 2usize..5, t in 1usize..20, th in 0.0f64..1.2) {
        let (h, truth) = activity(seed, k, t);
        let perm: Vec<usize> = (0..k).rev().collect();
        let permute = |m: &Tensor| Tensor::from_rows(&perm.iter().map(|&r| m.row(r)).collect::<Vec<_>>());
        let a = frame_f1(&h, &truth, th).unwrap();
        let b = frame_f1(&permute(&h), &permute(&truth), th).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a.f1));
        if a.precision + a.recall > 0.0 {
            prop_assert!((a.f1 - 2.0 * a.precision * a.recall / (a.precision + a.recall)).abs() < 1e-15);
        }
    }
}

#[test]
fn threshold_above_every_value_predicts_nothing() {
    let (h, truth) = activity(3, 3, 10);
    let r = frame_f1(&h, &truth, 100.0).unwrap();
    assert_eq!((r.tp, r.fp, r.recall, r.f1), (0, 0, 0.0, 0.0));
}

#[test]
fn confusion_matrix_has_unit_diagonal_and_bounded_entries() {
    let arch = FlowArch {
        dim: 3,
        n_coupling: 2,
        hidden_width: 4,
        n_hidden: 1,
    };
    let flows: Vec<FlowModel> = (0..3).map(|s| FlowModel::new(arch, "f", s).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sets: Vec<Tensor> = (0..3)
        .map(|i| Tensor::matrix(10, 3, (0..30).map(|_| i as f64 + rng.random_range(0.0..1.0)).collect()))
        .collect();
    let m = confusion_matrix(&flows, &sets).unwrap();
    for i in 0..3 {
        assert_eq!(m.values.get(i, i), 1.0);
        for j in 0..3 {
            assert!((0.0..=1.0).contains(&m.values.get(i, j)));
        }
    }
    assert!(confusion_matrix(&flows[..2], &sets).is_err());
}
