use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rvq_core::training::{make_mixture, train_quantizer, TrainConfig, TrainScheme};
use rvq_core::{Codebook, Metric, RvqQuantizer};

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn random_plain(n: usize, k: usize, d: usize, seed: u64, zero_entry: bool) -> RvqQuantizer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..n)
        .map(|l| {
            let mut e = normal_matrix(k, d, &mut rng) * (0.5f64).powi(l as i32);
            if zero_entry {
                e.row_mut(k - 1).fill(0.0);
            }
            Codebook::new(e, Metric::Euclidean).unwrap()
        })
        .collect();
    RvqQuantizer::plain(layers).unwrap()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn telescoping_identity(seed in any::<u64>(), x in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let q = random_plain(3, 8, 6, seed, false);
        let (frame, trace) = q.encode(&x).unwrap();
        let recon = q.decode(&frame).unwrap();
        let scale = x.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..6 {
            prop_assert!((x[i] - recon[i] - trace.final_residual[i]).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn zero_entry_never_increases_error(seed in any::<u64>(), x in proptest::collection::vec(-3.0f64..3.0, 5)) {
        let q = random_plain(4, 6, 5, seed, true);
        let (_, trace) = q.encode(&x).unwrap();
        let mut prev = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for &r in &trace.residual_norms {
            prop_assert!(r <= prev + 1e-12);
            prev = r;
        }
    }

    #[test]
    fn trace_matches_nearest_code_recursion(seed in any::<u64>(), x in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let q = random_plain(3, 5, 4, seed, false);
        let (frame, trace) = q.encode(&x).unwrap();
        let mut r = x.clone();
        for (n, layer) in q.layers().iter().enumerate() {
            let a = layer.nearest_code(&r).unwrap();
            prop_assert_eq!(a.index, frame.codes[n]);
            for (ri, qi) in r.iter_mut().zip(&a.quantized) {
                *ri -= qi;
            }
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - trace.residual_norms[n]).abs() <= 1e-12 * (1.0 + norm));
        }
    }

    #[test]
    fn encoding_is_deterministic(seed in any::<u64>(), x in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let q = random_plain(2, 7, 4, seed, false);
        prop_assert_eq!(q.encode(&x).unwrap().0, q.encode(&x).unwrap().0);
    }
}

#[test]
fn brute_force_recursion_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = random_plain(4, 32, 8, 3, false);
    for _ in 0..300 {
        let x: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let (frame, _) = q.encode(&x).unwrap();
        let mut r = x.clone();
        for (n, layer) in q.layers().iter().enumerate() {
            let e = layer.entries();
            let mut best = 0;
            for i in 1..e.nrows() {
                if dist2(&r, e.row(i).as_slice().unwrap()) < dist2(&r, e.row(best).as_slice().unwrap()) {
                    best = i;
                }
            }
            assert_eq!(frame.codes[n], best);
            for j in 0..8 {
                r[j] -= e[[best, j]];
            }
        }
    }
}

#[test]
fn more_layers_reconstruct_better_on_held_out_data() {
    let mix = make_mixture(32, 8, 3.0, 6000, 5).unwrap();
    let train = mix.data.slice(s![..5000, ..]).to_owned();
    let held = mix.data.slice(s![5000.., ..]).to_owned();
    let cfg = TrainConfig {
        scheme: TrainScheme::EmaRestart,
        num_layers: 4,
        codebook_size: 32,
        latent_dim: 8,
        steps: 200,
        batch_size: 128,
        restart_period: 20,
        seed: 1,
        ..Default::default()
    };
    let (q, _) = train_quantizer(train.view(), &cfg).unwrap();
    let frames = q.encode_batch(held.view()).unwrap();
    let mut means = Vec::new();
    for m in 1..=4 {
        let total: f64 = frames
            .iter()
            .zip(held.rows())
            .map(|(f, x)| dist2(&q.decode_prefix(f, m).unwrap(), x.as_slice().unwrap()))
            .sum();
        means.push(total / frames.len() as f64);
    }
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
}

#[test]
fn long_ema_training_stays_finite() {
    let data = make_mixture(24, 8, 4.0, 3000, 11).unwrap().data;
    for scheme in [TrainScheme::Ema, TrainScheme::EmaRestart] {
        let cfg = TrainConfig {
            scheme,
            num_layers: 2,
            codebook_size: 16,
            latent_dim: 8,
            steps: 10_000,
            batch_size: 32,
            restart_period: 50,
            seed: 2,
            ..Default::default()
        };
        let (q, report) = train_quantizer(data.view(), &cfg).unwrap();
        assert!(report.mse.iter().all(|v| v.is_finite()));
        assert!(q.layers().iter().all(|l| l.entries().iter().all(|v| v.is_finite())));
        assert_eq!(report.mse.len(), 10_000);
    }
}
