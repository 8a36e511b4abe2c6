//! Code-usage statistics over token streams: counts, utilization,
//! entropy and rank-frequency tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::TokenStream;

/// Usage statistics of a single RVQ layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub counts: Vec<u64>,
    pub used_codes: usize,
    pub utilization_fraction: f64,
    pub entropy_bits: f64,
    pub perplexity: f64,
    pub total_frames: u64,
}

impl LayerUtilization {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let used = counts.iter().filter(|&&c| c > 0).count();
        let entropy = if total == 0 {
            0.0
        } else {
            let n = total as f64;
            // 0 log 0 = 0
            -counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p.log2()
                })
                .sum::<f64>()
        };
        let entropy = entropy.max(0.0);
        Self {
            utilization_fraction: if counts.is_empty() {
                0.0
            } else {
                used as f64 / counts.len() as f64
            },
            counts,
            used_codes: used,
            entropy_bits: entropy,
            perplexity: entropy.exp2(),
            total_frames: total,
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.counts.len()
    }

    /// Adds another layer's counts elementwise.
    pub fn merge(&self, other: &LayerUtilization) -> Result<LayerUtilization> {
        if self.counts.len() != other.counts.len() {
            return Err(Error::Incompatible(format!(
                "codebook sizes {} and {}",
                self.counts.len(),
                other.counts.len()
            )));
        }
        Ok(Self::from_counts(
            self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        ))
    }
}

/// Counts of `layer` (0-based) over every frame of every stream.
pub fn utilization(streams: &[TokenStream], layer: usize) -> Result<LayerUtilization> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidArgument("no token streams given".into()))?;
    let (k, n_layers) = (first.codebook_size, first.layers);
    for s in streams {
        if s.codebook_size != k {
            return Err(Error::Incompatible(format!(
                "stream {:?} has codebook size {}, stream {:?} has {k}",
                s.id, s.codebook_size, first.id
            )));
        }
        if s.layers != n_layers {
            return Err(Error::Incompatible(format!(
                "stream {:?} has {} layers, stream {:?} has {n_layers}",
                s.id, s.layers, first.id
            )));
        }
    }
    if layer >= n_layers {
        return Err(Error::IndexOutOfRange {
            index: layer,
            size: n_layers,
        });
    }
    let mut counts = vec![0u64; k];
    for s in streams {
        for (t, f) in s.frames.iter().enumerate() {
            let code = *f.codes.get(layer).ok_or_else(|| {
                Error::Format(format!("stream {:?} frame {t} is missing layer {layer}", s.id))
            })?;
            if code >= k {
                return Err(Error::IndexOutOfRange { index: code, size: k });
            }
            counts[code] += 1;
        }
    }
    Ok(LayerUtilization::from_counts(counts))
}

/// All layers of the streams.
pub fn utilization_all(streams: &[TokenStream]) -> Result<Vec<LayerUtilization>> {
    let n = streams.first().map(|s| s.layers).unwrap_or(0);
    (0..n).map(|l| utilization(streams, l)).collect()
}

/// `(rank, count)` with counts sorted descending, ties by code index, ranks
/// starting at 1. Zero counts stay at the tail.
pub fn rank_frequency(report: &LayerUtilization) -> Vec<(usize, u64)> {
    let mut order: Vec<usize> = (0..report.counts.len()).collect();
    order.sort_by(|&a, &b| report.counts[b].cmp(&report.counts[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .enumerate()
        .map(|(r, code)| (r + 1, report.counts[code]))
        .collect()
}

/// First rank whose count is zero, if any code is unused.
pub fn first_zero_rank(table: &[(usize, u64)]) -> Option<usize> {
    table.iter().find(|(_, c)| *c == 0).map(|(r, _)| *r)
}
