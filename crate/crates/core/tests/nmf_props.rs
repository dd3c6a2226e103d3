use dds_core::nmf::{group_by_source, nmf_decompose, FixedDictionary};
use dds_core::{SolverSchedule, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn nmf_cost_does_not_increase() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let atoms: Vec<Vec<f64>> = (0..12).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
    let dict = FixedDictionary::new(Tensor::from_rows(&atoms), vec![0; 12]).unwrap();
    let s = Tensor::row_vector((0..6).map(|_| rng.random::<f64>() * 2.0).collect());
    let schedule = SolverSchedule {
        record_losses: true,
        ..Default::default()
    };
    let out = nmf_decompose(&s, &dict, &schedule).unwrap();
    let losses = &out.traces[0].losses;
    assert!(out.losses[0] <= losses[0]);
    let mut best = f64::INFINITY;
    for &l in losses {
        best = best.min(l);
    }
    assert_eq!(best, out.losses[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grouping_preserves_column_sums(
        labels in prop::collection::vec(0usize..4, 1..12),
        t in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = labels.len();
        let dict = FixedDictionary::new(Tensor::zeros(vec![n, 2]), labels).unwrap();
        let h = Tensor::matrix(n, t, (0..n * t).map(|_| rng.random::<f64>()).collect());
        let g = group_by_source(&h, &dict).unwrap();
        for col in 0..t {
            let a: f64 = (0..n).map(|i| h.get(i, col)).sum();
            let b: f64 = (0..g.rows()).map(|k| g.get(k, col)).sum();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
