//! Quantizer training on vector corpora.
//!
//! Two regimes: EMA codebook updates (optionally with dead-code restart)
//! for plain Euclidean stacks, and gradient descent on reconstruction,
//! codebook and commitment losses for projected cosine stacks.

mod corpus;
pub mod projected;

pub use corpus::{make_corpus, make_mixture, CorpusSpec, Mixture};
pub use projected::{
    apply_gradients, loss_and_gradients, Assignments, LossBreakdown, LossWeights,
    ProjectedGradients, StraightThrough,
};

use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analytics::LayerUtilization;
use crate::error::{check_dim, Error, Result};
use crate::rvq::RvqQuantizer;
use crate::vq::{kmeans_init, Codebook, Metric, ProjectionPair, DEFAULT_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScheme {
    Ema,
    EmaRestart,
    Projected,
}

/// How code vectors start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    /// Entries drawn from N(0, 1), independent of the data.
    Random,
    /// k-means on the first `max(batch_size, K)` shuffled corpus vectors,
    /// layer by layer on the residuals of the layers above.
    KMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: TrainScheme,
    pub num_layers: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Only used by [`TrainScheme::Projected`].
    pub quant_dim: usize,
    pub decay: f64,
    pub epsilon: f64,
    pub commitment_weight: f64,
    pub codebook_weight: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub restart_period: usize,
    pub restart_threshold: u64,
    pub init: CodebookInit,
    pub kmeans_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: TrainScheme::Ema,
            num_layers: 8,
            codebook_size: 1024,
            latent_dim: 64,
            quant_dim: 8,
            decay: 0.99,
            epsilon: DEFAULT_EPSILON,
            commitment_weight: 0.25,
            codebook_weight: 1.0,
            learning_rate: 1e-3,
            steps: 1000,
            batch_size: 256,
            seed: 0,
            restart_period: 100,
            restart_threshold: 1,
            init: CodebookInit::Random,
            kmeans_iterations: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.num_layers == 0 || self.codebook_size == 0 {
            return fail("batch_size, num_layers and codebook_size must be positive".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be positive".into());
        }
        if self.scheme == TrainScheme::Projected
            && (self.quant_dim == 0 || self.quant_dim > self.latent_dim)
        {
            return fail(format!(
                "quant_dim must satisfy 1 <= q <= d, got q={} d={}",
                self.quant_dim, self.latent_dim
            ));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return fail(format!("decay must lie in [0, 1), got {}", self.decay));
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive".into());
        }
        if !(self.commitment_weight >= 0.0 && self.codebook_weight >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive".into());
        }
        if self.scheme == TrainScheme::EmaRestart && self.restart_period == 0 {
            return fail("restart_period must be at least 1".into());
        }
        Ok(())
    }

    pub fn metric(&self) -> Metric {
        match self.scheme {
            TrainScheme::Projected => Metric::Cosine,
            _ => Metric::Euclidean,
        }
    }
}

/// Per-step series plus end-of-training utilization over the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Batch reconstruction MSE per step, averaged over rows and dimensions.
    pub mse: Vec<f64>,
    pub codebook_loss: Vec<f64>,
    pub commitment_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    /// Restarted codes per layer, summed over all restart passes.
    pub restarted: Vec<usize>,
    /// Per-layer code usage when the final quantizer encodes the corpus.
    pub utilization: Vec<LayerUtilization>,
    /// Reconstruction MSE of the final quantizer over the whole corpus.
    pub corpus_mse: f64,
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn final_mse(&self) -> f64 {
        *self.mse.last().unwrap_or(&f64::NAN)
    }

    pub fn used_codes(&self) -> Vec<usize> {
        self.utilization.iter().map(|u| u.used_codes).collect()
    }

    pub fn utilization_fractions(&self) -> Vec<f64> {
        self.utilization.iter().map(|u| u.utilization_fraction).collect()
    }

    /// Trailing moving average of the total loss over `window` steps.
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        moving_average(&self.total_loss, window)
    }
}

pub(crate) fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Trains a fresh quantizer on `corpus` (rows are latent vectors).
pub fn train_quantizer(
    corpus: ArrayView2<f64>,
    config: &TrainConfig,
) -> Result<(RvqQuantizer, TrainReport)> {
    config.validate()?;
    check_dim(config.latent_dim, corpus.ncols())?;
    let needed = config.codebook_size.max(config.batch_size);
    if corpus.nrows() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: corpus.nrows(),
        });
    }
    let corpus = corpus.as_standard_layout();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut quantizer = initialize(corpus.view(), config, &mut rng)?;
    let mut report = TrainReport {
        mse: Vec::with_capacity(config.steps),
        codebook_loss: Vec::with_capacity(config.steps),
        commitment_loss: Vec::with_capacity(config.steps),
        total_loss: Vec::with_capacity(config.steps),
        restarted: vec![0; config.num_layers],
        utilization: Vec::new(),
        corpus_mse: f64::NAN,
        wall_clock: Duration::ZERO,
    };
    for layer in quantizer.layers_mut() {
        layer.reset_usage();
    }

    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..corpus.nrows()))
            .collect();
        let batch = corpus.select(Axis(0), &idx);
        let loss = match config.scheme {
            TrainScheme::Ema | TrainScheme::EmaRestart => {
                let restart = config.scheme == TrainScheme::EmaRestart
                    && (step + 1) % config.restart_period == 0;
                let restart_seed = rng.random::<u64>();
                ema_step(&mut quantizer, batch.view(), config, restart.then_some(restart_seed), &mut report.restarted)?
            }
            TrainScheme::Projected => {
                let weights = LossWeights {
                    codebook: config.codebook_weight,
                    commitment: config.commitment_weight,
                };
                let (loss, grads, _) = loss_and_gradients(&quantizer, batch.view(), weights, None)?;
                apply_gradients(&mut quantizer, &grads, config.learning_rate)?;
                loss
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: total loss {} (reconstruction {}, codebook {}, commitment {})",
                loss.total, loss.reconstruction, loss.codebook, loss.commitment
            )));
        }
        if quantizer
            .layers()
            .iter()
            .any(|l| l.entries().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("step {step}: codebook entry")));
        }
        report.mse.push(loss.reconstruction);
        report.codebook_loss.push(loss.codebook);
        report.commitment_loss.push(loss.commitment);
        report.total_loss.push(loss.total);
    }

    let frames = quantizer.encode_batch(corpus.view())?;
    let recon = quantizer.decode_batch(&frames)?;
    report.corpus_mse = (&corpus - &recon).mapv(|v| v * v).mean().unwrap_or(0.0);
    report.utilization = (0..config.num_layers)
        .map(|n| {
            let mut counts = vec![0u64; config.codebook_size];
            for f in &frames {
                counts[f.codes[n]] += 1;
            }
            LayerUtilization::from_counts(counts)
        })
        .collect();
    report.wall_clock = started.elapsed();
    Ok((quantizer, report))
}

fn initialize(
    corpus: ArrayView2<f64>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RvqQuantizer> {
    let (k, d) = (config.codebook_size, config.latent_dim);
    let q = match config.scheme {
        TrainScheme::Projected => config.quant_dim,
        _ => d,
    };
    let metric = config.metric();

    let projections: Option<Vec<ProjectionPair>> = match config.scheme {
        TrainScheme::Projected => {
            let w_in = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
            let w_out = Normal::new(0.0, 1.0 / (q as f64).sqrt()).expect("valid std");
            let mut pairs = Vec::with_capacity(config.num_layers);
            for _ in 0..config.num_layers {
                let pin = Array2::from_shape_fn((d, q), |_| w_in.sample(rng));
                let pout = Array2::from_shape_fn((q, d), |_| w_out.sample(rng));
                pairs.push(ProjectionPair::new(pin, pout)?);
            }
            Some(pairs)
        }
        _ => None,
    };

    let layers = match config.init {
        CodebookInit::Random => (0..config.num_layers)
            .map(|_| {
                let e = Array2::from_shape_fn((k, q), |_| StandardNormal.sample(rng));
                Codebook::new(e, metric)
            })
            .collect::<Result<Vec<_>>>()?,
        CodebookInit::KMeans => {
            let take = k.max(config.batch_size).min(corpus.nrows());
            let mut order: Vec<usize> = (0..corpus.nrows()).collect();
            order.shuffle(rng);
            let mut residual = corpus.select(Axis(0), &order[..take]);
            let mut layers = Vec::with_capacity(config.num_layers);
            for n in 0..config.num_layers {
                let space = match &projections {
                    Some(p) => residual.dot(p[n].proj_in()),
                    None => residual.clone(),
                };
                let seed = rng.random::<u64>();
                let mut layer = kmeans_init(space.view(), k, config.kmeans_iterations, seed, metric)?;
                // cosine lookup cannot handle a zero centroid
                if metric == Metric::Cosine {
                    for mut row in layer.entries_mut().rows_mut() {
                        if row.iter().all(|&v| v == 0.0) {
                            row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
                        }
                    }
                }
                let assign = layer.assign_batch(space.view())?;
                for (i, (code, _)) in assign.iter().enumerate() {
                    let back = match &projections {
                        Some(p) => p[n].project_out(layer.entry(*code))?,
                        None => layer.entry(*code).to_vec(),
                    };
                    for (r, b) in residual.row_mut(i).iter_mut().zip(&back) {
                        *r -= b;
                    }
                }
                layers.push(layer);
            }
            layers
        }
    };

    match projections {
        Some(p) => RvqQuantizer::projected(layers, p),
        None => RvqQuantizer::plain(layers),
    }
}

/// Sequential per-layer EMA over one batch. Residuals use the entries as
/// they were before this step's update.
fn ema_step(
    quantizer: &mut RvqQuantizer,
    batch: ArrayView2<f64>,
    config: &TrainConfig,
    restart_seed: Option<u64>,
    restarted: &mut [usize],
) -> Result<LossBreakdown> {
    let mut residual = batch.to_owned();
    let mut diff2 = 0.0;
    let rows = batch.nrows() as f64;
    for (n, layer) in quantizer.layers_mut().iter_mut().enumerate() {
        let assign: Vec<usize> = layer
            .assign_batch(residual.view())?
            .into_iter()
            .map(|(i, _)| i)
            .collect();
        let quantized = layer.entries().select(Axis(0), &assign);
        let before = residual.clone();
        residual -= &quantized;
        diff2 += residual.iter().map(|v| v * v).sum::<f64>();
        layer.ema_update(before.view(), &assign, config.decay, config.epsilon)?;
        if let Some(seed) = restart_seed {
            let seed = seed.wrapping_add(n as u64);
            restarted[n] += layer.restart_dead_codes(before.view(), config.restart_threshold, seed)?;
            layer.reset_usage();
        }
    }
    let q = quantizer.quant_dim() as f64;
    let per_layer = diff2 / (rows * q);
    let reconstruction = residual.iter().map(|v| v * v).sum::<f64>() / (rows * q);
    let codebook = config.codebook_weight * per_layer;
    let commitment = config.commitment_weight * per_layer;
    Ok(LossBreakdown {
        reconstruction,
        codebook,
        commitment,
        total: reconstruction + codebook + commitment,
    })
}
