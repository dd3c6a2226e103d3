use std::sync::Arc;

use dds_core::nmf::{nmf_decompose, FixedDictionary};
use dds_core::{
    dds_decompose, dds_loss, reconstruct, train_flow, DdsConfig, FlowArch, FlowModel, SolverSchedule, Tensor,
    TrainConfig,
};
use dds_core::dds::dds_loss_with_gradient;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(dim: usize) -> FlowArch {
    FlowArch {
        dim,
        n_coupling: 3,
        hidden_width: 8,
        n_hidden: 2,
    }
}

fn jittered(dim: usize, seed: u64) -> FlowModel {
    let mut model = FlowModel::new(arch(dim), "test", seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in model.parameters_mut() {
        for v in Arc::make_mut(p).data_mut() {
            *v += 0.2 * rng.random_range(-1.0..1.0);
        }
    }
    model
}

fn short_schedule(steps: usize) -> SolverSchedule {
    SolverSchedule {
        max_steps: steps,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_gradients_match_finite_differences(seed in any::<u64>(), k in 1usize..4, dim in 2usize..9) {
        let flows: Vec<FlowModel> = (0..k).map(|i| jittered(dim, seed.wrapping_add(i as u64))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let z = Tensor::matrix(k, dim, (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let h: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.5)).collect();
        let c = 0.05;
        let (loss, dz, dh) = dds_loss_with_gradient(&s, &z, &h, &flows, c).unwrap();
        prop_assert_eq!(loss, dds_loss(&s, &z, &h, &flows, c).unwrap());
        let step = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        for i in 0..k * dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.data_mut()[i] += step;
            zm.data_mut()[i] -= step;
            let fd = (dds_loss(&s, &zp, &h, &flows, c).unwrap() - dds_loss(&s, &zm, &h, &flows, c).unwrap()) / (2.0 * step);
            prop_assert!(rel(dz.data()[i], fd) < 1e-4, "z[{i}]: {} vs {fd}", dz.data()[i]);
        }
        for i in 0..k {
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp[i] += step;
            hm[i] -= step;
            let fd = (dds_loss(&s, &z, &hp, &flows, c).unwrap() - dds_loss(&s, &z, &hm, &flows, c).unwrap()) / (2.0 * step);
            prop_assert!(rel(dh[i], fd) < 1e-4, "h[{i}]: {} vs {fd}", dh[i]);
        }
    }

    #[test]
    fn gains_stay_non_negative_and_best_loss_never_rises(seed in any::<u64>()) {
        let flows = [jittered(4, seed), jittered(4, seed ^ 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(0.0..1.0)).collect());
        let schedule = SolverSchedule { record_losses: true, ..short_schedule(300) };
        let out = dds_decompose(&frames, &flows, &schedule, &DdsConfig::default()).unwrap();
        prop_assert!(out.activations.data().iter().all(|&h| h >= 0.0));
        for (t, tr) in out.traces.iter().enumerate() {
            let best = tr.losses.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(best, out.losses[t]);
            prop_assert!(out.losses[t] <= tr.losses[0]);
        }
    }
}

#[test]
fn frames_are_solved_independently() {
    let flows = [jittered(5, 1), jittered(5, 2)];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frames = Tensor::matrix(3, 5, (0..15).map(|_| rng.random_range(0.0..1.0)).collect());
    let schedule = short_schedule(400);
    let all = dds_decompose(&frames, &flows, &schedule, &DdsConfig::default()).unwrap();
    for (j, t) in [2usize, 0, 1].into_iter().enumerate() {
        let one = dds_decompose(&Tensor::row_vector(frames.row(t).to_vec()), &flows, &schedule, &DdsConfig::default())
            .unwrap();
        assert_eq!(one.losses[0], all.losses[t], "frame {t} (order {j})");
        assert_eq!(one.reconstruction.row(0), all.reconstruction.row(t));
    }
}

#[test]
fn reconstruction_is_the_gain_weighted_sum_of_decoded_latents() {
    let flows = [jittered(3, 4), jittered(3, 5)];
    let latents = Tensor::from_parts(vec![1, 2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4]).unwrap();
    let h = Tensor::matrix(2, 1, vec![0.7, 1.3]);
    let rec = reconstruct(&h, &latents, &flows).unwrap();
    let a = flows[0].inverse(&[0.1, -0.2, 0.3]).unwrap();
    let b = flows[1].inverse(&[0.5, 0.0, -0.4]).unwrap();
    for i in 0..3 {
        assert!((rec.get(0, i) - (0.7 * a[i] + 1.3 * b[i])).abs() < 1e-14);
    }
}

/// Two toy sources with spectral bumps at different positions.
fn toy_source(rng: &mut ChaCha8Rng, center: f64, n: usize) -> Tensor {
    let d = 8;
    let mut rows = Vec::new();
    for _ in 0..n {
        let amp = rng.random_range(0.3..0.9);
        let c = center + rng.random_range(-0.4..0.4);
        let width = rng.random_range(0.8..1.4);
        rows.push((0..d).map(|i| amp * (-((i as f64 - c) / width).powi(2)).exp()).collect::<Vec<f64>>());
    }
    Tensor::from_rows(&rows)
}

#[test]
fn mixture_of_held_out_frames_beats_the_frame_dictionary() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sources = [toy_source(&mut rng, 2.0, 300), toy_source(&mut rng, 5.0, 300)];
    let cfg = TrainConfig {
        max_epochs: 150,
        batch_size: 32,
        patience: 30,
        seed: 3,
        ..Default::default()
    };
    let flows: Vec<FlowModel> = sources
        .iter()
        .map(|s| train_flow(s, arch(8), "toy", &cfg).unwrap().model)
        .collect();
    let (a, b) = (sources[0].row(0), sources[1].row(0));
    let mix: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.6 * x + 0.4 * y).collect();
    let frame = Tensor::row_vector(mix.clone());

    let held_out: Vec<Tensor> = sources.iter().map(|s| Tensor::from_rows(&(1..s.rows()).map(|r| s.row(r)).collect::<Vec<_>>())).collect();
    let dict = FixedDictionary::from_sources(&held_out).unwrap();
    let schedule = SolverSchedule::default();
    let nmf = nmf_decompose(&frame, &dict, &schedule).unwrap();
    let nmf_rec = dict.reconstruct(&nmf.activations).unwrap();
    let dds = dds_decompose(&frame, &flows, &schedule, &DdsConfig::default()).unwrap();
    let err = |r: &Tensor| mix.iter().zip(r.row(0)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (e_dds, e_nmf) = (err(&dds.reconstruction), err(&nmf_rec));
    assert!(e_dds < e_nmf, "dds {e_dds} nmf {e_nmf}");
}
