//! Categorical helpers shared by the generation schedulers.

use rand::Rng;

use crate::error::{Error, Result};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `softmax(logits / temperature)`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Draws an index from `softmax(logits / temperature)`.
///
/// With `top_k = Some(k)` only the `k` largest logits (ties by lower index)
/// keep probability mass.
pub fn sample_with_temperature<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_k: Option<usize>,
    rng: &mut R,
) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty logit vector".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    let mut probs = softmax(logits, temperature);
    if let Some(k) = top_k {
        if k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if k < logits.len() {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            for &i in &order[k..] {
                probs[i] = 0.0;
            }
        }
    }
    Ok(draw(&probs, rng))
}

/// Inverse-CDF draw from unnormalized non-negative weights.
pub(crate) fn draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}
