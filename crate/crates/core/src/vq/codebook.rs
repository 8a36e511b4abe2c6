use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{dot, norm, squared_distance, Metric, VqAssignment};
use crate::error::{check_dim, Error, Result};

/// Laplace smoothing constant for EMA cluster sizes.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// One quantization layer: `K` code vectors of dimension `q` plus the EMA
/// statistics that drive the unsupervised update.
///
/// Lookups take `&self` and may run concurrently; the update methods take
/// `&mut self`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
    ema_cluster_size: Array1<f64>,
    ema_embed_sum: Array2<f64>,
    usage_counts: Vec<u64>,
    metric: Metric,
}

impl Codebook {
    /// Builds a codebook whose EMA statistics start at `(1, entry)` for every
    /// code, the same state a restarted code receives.
    pub fn new(entries: Array2<f64>, metric: Metric) -> Result<Self> {
        let k = entries.nrows();
        let sizes = Array1::ones(k);
        let sums = entries.clone();
        Self::from_parts(entries, sizes, sums, metric)
    }

    pub fn from_parts(
        entries: Array2<f64>,
        ema_cluster_size: Array1<f64>,
        ema_embed_sum: Array2<f64>,
        metric: Metric,
    ) -> Result<Self> {
        let (k, q) = entries.dim();
        if k == 0 || q == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook must have K >= 1 and q >= 1, got {k}x{q}"
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        check_dim(k, ema_cluster_size.len())?;
        if ema_embed_sum.dim() != (k, q) {
            return Err(Error::InvalidArgument(format!(
                "EMA sum shape {:?} does not match entries {k}x{q}",
                ema_embed_sum.dim()
            )));
        }
        if ema_cluster_size.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::InvalidArgument(
                "EMA cluster sizes must be non-negative".into(),
            ));
        }
        Ok(Self {
            entries: entries.as_standard_layout().into_owned(),
            ema_cluster_size,
            ema_embed_sum: ema_embed_sum.as_standard_layout().into_owned(),
            usage_counts: vec![0; k],
            metric,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &[f64] {
        let q = self.dim();
        &self.entries.as_slice().expect("standard layout")[index * q..(index + 1) * q]
    }

    pub fn ema_cluster_size(&self) -> &Array1<f64> {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &Array2<f64> {
        &self.ema_embed_sum
    }

    /// Assignments per code since the last [`Codebook::reset_usage`].
    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub(crate) fn entries_mut(&mut self) -> &mut Array2<f64> {
        &mut self.entries
    }

    /// Exhaustive nearest-code search. Ties resolve to the lowest index.
    pub fn nearest_code(&self, query: &[f64]) -> Result<VqAssignment> {
        let (index, distance) = self.nearest_index(query)?;
        Ok(VqAssignment {
            index,
            quantized: self.entry(index).to_vec(),
            distance,
        })
    }

    /// Like [`Codebook::nearest_code`] without copying the entry.
    pub fn nearest_index(&self, query: &[f64]) -> Result<(usize, f64)> {
        check_dim(self.dim(), query.len())?;
        match self.metric {
            Metric::Euclidean => {
                let (i, d2) = self.scan(|e| squared_distance(query, e));
                Ok((i, d2.sqrt()))
            }
            Metric::Cosine => {
                let qn = norm(query);
                if qn == 0.0 {
                    return Err(Error::Degenerate("zero-norm query under cosine metric".into()));
                }
                let norms = self.entry_norms()?;
                Ok(self.cosine_scan(query, qn, &norms))
            }
        }
    }

    /// Nearest codes for every row of `queries`. Rows are processed in
    /// parallel on the current rayon pool; the output order is the row order.
    pub fn assign_batch(&self, queries: ArrayView2<f64>) -> Result<Vec<(usize, f64)>> {
        check_dim(self.dim(), queries.ncols())?;
        let norms = match self.metric {
            Metric::Cosine => Some(self.entry_norms()?),
            Metric::Euclidean => None,
        };
        let rows: Vec<_> = queries.axis_iter(Axis(0)).collect();
        rows.par_iter()
            .map(|row| {
                let owned;
                let query = match row.as_slice() {
                    Some(s) => s,
                    None => {
                        owned = row.to_vec();
                        &owned[..]
                    }
                };
                match &norms {
                    None => {
                        let (i, d2) = self.scan(|e| squared_distance(query, e));
                        Ok((i, d2.sqrt()))
                    }
                    Some(norms) => {
                        let qn = norm(query);
                        if qn == 0.0 {
                            return Err(Error::Degenerate(
                                "zero-norm query under cosine metric".into(),
                            ));
                        }
                        Ok(self.cosine_scan(query, qn, norms))
                    }
                }
            })
            .collect()
    }

    fn scan(&self, dist: impl Fn(&[f64]) -> f64) -> (usize, f64) {
        let mut best = (0, dist(self.entry(0)));
        for i in 1..self.size() {
            let d = dist(self.entry(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn cosine_scan(&self, query: &[f64], qn: f64, norms: &[f64]) -> (usize, f64) {
        self.scan_indexed(|i, e| 1.0 - dot(query, e) / (qn * norms[i]))
    }

    fn scan_indexed(&self, dist: impl Fn(usize, &[f64]) -> f64) -> (usize, f64) {
        let mut best = (0, dist(0, self.entry(0)));
        for i in 1..self.size() {
            let d = dist(i, self.entry(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn entry_norms(&self) -> Result<Vec<f64>> {
        let norms: Vec<f64> = (0..self.size()).map(|i| norm(self.entry(i))).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Degenerate(format!(
                "code {i} has zero norm under cosine metric"
            )));
        }
        Ok(norms)
    }

    /// One EMA step over a batch of `(row of batch, assigned code)` pairs.
    ///
    /// `ema_cluster_size` and `ema_embed_sum` decay toward the batch counts
    /// and sums; entries become `sum_i / smoothed_size_i` where
    /// `smoothed_size_i = (size_i + eps) / (n + K eps) * n`.
    pub fn ema_update(
        &mut self,
        batch: ArrayView2<f64>,
        assignments: &[usize],
        decay: f64,
        epsilon: f64,
    ) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay must lie in [0, 1), got {decay}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty EMA batch".into()));
        }
        check_dim(self.dim(), batch.ncols())?;
        check_dim(batch.nrows(), assignments.len())?;
        let k = self.size();
        if let Some(&bad) = assignments.iter().find(|&&i| i >= k) {
            return Err(Error::IndexOutOfRange { index: bad, size: k });
        }

        let mut counts = vec![0u64; k];
        let mut sums = Array2::<f64>::zeros((k, self.dim()));
        for (row, &i) in batch.axis_iter(Axis(0)).zip(assignments) {
            counts[i] += 1;
            let mut target = sums.row_mut(i);
            target += &row;
        }

        for i in 0..k {
            self.ema_cluster_size[i] =
                decay * self.ema_cluster_size[i] + (1.0 - decay) * counts[i] as f64;
        }
        self.ema_embed_sum.zip_mut_with(&sums, |old, &new| {
            *old = decay * *old + (1.0 - decay) * new;
        });

        let total: f64 = self.ema_cluster_size.sum();
        let denom = total + k as f64 * epsilon;
        for i in 0..k {
            let smoothed = (self.ema_cluster_size[i] + epsilon) / denom * total;
            let sum = self.ema_embed_sum.row(i);
            self.entries.row_mut(i).assign(&(&sum / smoothed));
            self.usage_counts[i] += counts[i];
        }
        Ok(())
    }

    /// Replaces every code whose usage count is below `threshold` with a row
    /// sampled uniformly from `batch`, resetting its EMA statistics to
    /// `(1, entry)` and its usage count to zero. Returns how many codes were
    /// replaced.
    pub fn restart_dead_codes(
        &mut self,
        batch: ArrayView2<f64>,
        threshold: u64,
        seed: u64,
    ) -> Result<usize> {
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty restart batch".into()));
        }
        check_dim(self.dim(), batch.ncols())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut restarted = 0;
        for i in 0..self.size() {
            if self.usage_counts[i] >= threshold {
                continue;
            }
            let pick = rng.random_range(0..batch.nrows());
            let row = batch.row(pick);
            self.entries.row_mut(i).assign(&row);
            self.ema_embed_sum.row_mut(i).assign(&row);
            self.ema_cluster_size[i] = 1.0;
            self.usage_counts[i] = 0;
            restarted += 1;
        }
        Ok(restarted)
    }
}
