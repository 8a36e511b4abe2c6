//! Seeded fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvq_core::{Codebook, Metric, RvqQuantizer, TokenFrame, TokenStream};

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn plain_quantizer(layers: usize, k: usize, d: usize, seed: u64) -> RvqQuantizer {
    let books = (0..layers)
        .map(|l| {
            let e = uniform_matrix(k, d, seed + l as u64) * 0.5f64.powi(l as i32);
            Codebook::new(e, Metric::Euclidean).expect("finite entries")
        })
        .collect();
    RvqQuantizer::plain(books).expect("consistent layers")
}

pub fn random_stream(frames: usize, layers: usize, k: usize, seed: u64) -> TokenStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..frames)
        .map(|_| TokenFrame::new((0..layers).map(|_| rng.random_range(0..k)).collect()))
        .collect();
    TokenStream::new("bench", 50.0, layers, k, frames).expect("valid stream")
}
