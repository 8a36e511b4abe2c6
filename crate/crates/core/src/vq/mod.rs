//! Single-layer vector quantization.

mod codebook;
mod kmeans;
mod projection;

pub use codebook::{Codebook, DEFAULT_EPSILON};
pub use kmeans::kmeans_init;
pub use projection::ProjectionPair;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Lookup distance used by a codebook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `||a - b||`
    Euclidean,
    /// `1 - cos(a, b)`; entries are stored raw and normalized at lookup.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_dim(a.len(), b.len())?;
        match self {
            Metric::Euclidean => Ok(squared_distance(a, b).sqrt()),
            Metric::Cosine => {
                let na = norm(a);
                let nb = norm(b);
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::Degenerate(
                        "zero-norm vector under cosine metric".into(),
                    ));
                }
                Ok(1.0 - dot(a, b) / (na * nb))
            }
        }
    }
}

/// Result of a nearest-code lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct VqAssignment {
    pub index: usize,
    /// Copy of `entries[index]`.
    pub quantized: Vec<f64>,
    pub distance: f64,
}

/// `||q - z||^2`, the term that pulls code vectors toward encoder outputs.
pub fn codebook_loss(z: &[f64], q: &[f64]) -> Result<f64> {
    check_dim(z.len(), q.len())?;
    Ok(squared_distance(q, z))
}

/// Same value as [`codebook_loss`]; during training its gradient is routed
/// to the encoder side instead of the code vectors.
pub fn commitment_loss(z: &[f64], q: &[f64]) -> Result<f64> {
    codebook_loss(z, q)
}

/// Snake activation `x + sin^2(alpha x) / alpha`.
pub fn snake(x: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "snake alpha must be positive, got {alpha}"
        )));
    }
    let s = (alpha * x).sin();
    Ok(x + s * s / alpha)
}

/// Elementwise [`snake`].
pub fn snake_vec(xs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    xs.iter().map(|&x| snake(x, alpha)).collect()
}

/// Sum of `f(a[i], b[i])` over four interleaved lanes, which lets the
/// compiler vectorize the loop.
#[inline]
fn lane_sum(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += f(x[l], y[l]);
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    lane_sum(a, b, |x, y| x * y)
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    lane_sum(a, b, |x, y| (x - y) * (x - y))
}
