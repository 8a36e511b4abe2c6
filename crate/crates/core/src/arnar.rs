//! Two-stage token generation: the first layer is sampled autoregressively
//! with an end-of-sequence class, the remaining layers are filled in one
//! greedy pass per layer.
//!
//! EOS is the extra class index `K` of the AR vocabulary.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::{TokenFrame, TokenStream};
use crate::sampling::argmax;
pub use crate::sampling::sample_with_temperature;

/// Autoregressive first-layer model over `K + 1` classes.
pub trait ArModel: Sync {
    fn codebook_size(&self) -> usize;

    /// Logits of length `K + 1` for the code following `prefix`. Only codes
    /// generated so far are passed in.
    fn next_logits(&self, condition: &[usize], prompt: &[usize], prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Layer-wise model for layers above the first.
pub trait NarModel: Sync {
    fn codebook_size(&self) -> usize;

    /// `T x K` logits for `target_layer` (0-based, at least 1); `decoded`
    /// holds the `target_layer` layers already committed, each `T` long.
    fn layer_logits(
        &self,
        condition: &[usize],
        prompt: &TokenStream,
        decoded: &[Vec<usize>],
        target_layer: usize,
    ) -> Result<Array2<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub temperature: f64,
    pub max_frames: usize,
    pub rng_seed: u64,
    pub top_k: Option<usize>,
}

impl GenConfig {
    pub const PRESET_TEMPERATURES: [f64; 3] = [1.0, 0.9, 0.8];

    pub fn new(temperature: f64, max_frames: usize, rng_seed: u64) -> Self {
        Self {
            temperature,
            max_frames,
            rng_seed,
            top_k: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_frames == 0 {
            return Err(Error::InvalidArgument("max_frames must be at least 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::new(1.0, 1500, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArOutput {
    pub codes: Vec<usize>,
    /// Number of `next_logits` queries.
    pub steps: usize,
    pub hit_eos: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArNarStats {
    pub ar_steps: usize,
    pub nar_passes: usize,
    pub hit_eos: bool,
}

pub fn generate_ar<M: ArModel + ?Sized>(
    model: &M,
    condition: &[usize],
    prompt_layer1: &[usize],
    config: &GenConfig,
) -> Result<ArOutput> {
    config.validate()?;
    let k = model.codebook_size();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut codes = Vec::new();
    let mut steps = 0;
    while codes.len() < config.max_frames {
        let logits = model.next_logits(condition, prompt_layer1, &codes)?;
        steps += 1;
        if logits.len() != k + 1 {
            return Err(Error::DimensionMismatch {
                expected: k + 1,
                got: logits.len(),
            });
        }
        let next = sample_with_temperature(&logits, config.temperature, config.top_k, &mut rng)?;
        if next == k {
            return Ok(ArOutput {
                codes,
                steps,
                hit_eos: true,
            });
        }
        codes.push(next);
    }
    Ok(ArOutput {
        codes,
        steps,
        hit_eos: false,
    })
}

/// Fills layers `2..=num_layers` by per-frame argmax, one model call per layer.
pub fn generate_nar<M: NarModel + ?Sized>(
    model: &M,
    condition: &[usize],
    prompt: &TokenStream,
    layer1: &[usize],
    num_layers: usize,
) -> Result<TokenStream> {
    let k = model.codebook_size();
    if layer1.is_empty() {
        return Err(Error::InvalidArgument("no first-layer codes to extend".into()));
    }
    if num_layers < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 layers, got {num_layers}"
        )));
    }
    if let Some(&c) = layer1.iter().find(|&&c| c >= k) {
        return Err(Error::IndexOutOfRange { index: c, size: k });
    }
    let t = layer1.len();
    let mut decoded = vec![layer1.to_vec()];
    for n in 1..num_layers {
        let logits = model.layer_logits(condition, prompt, &decoded, n)?;
        if logits.dim() != (t, k) {
            return Err(Error::DimensionMismatch {
                expected: t * k,
                got: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {} logits", n + 1)));
        }
        let layer = logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect();
        decoded.push(layer);
    }
    let frames = (0..t)
        .map(|i| TokenFrame::new(decoded.iter().map(|l| l[i]).collect()))
        .collect();
    TokenStream::new(prompt.id.clone(), prompt.token_rate_hz, num_layers, k, frames)
}

/// AR over the first layer followed by NAR over the rest. The output holds
/// only generated frames; the prompt is context.
pub fn generate_text_to_tokens<A, N>(
    ar: &A,
    nar: &N,
    condition: &[usize],
    prompt: &TokenStream,
    config: &GenConfig,
) -> Result<(TokenStream, ArNarStats)>
where
    A: ArModel + ?Sized,
    N: NarModel + ?Sized,
{
    prompt.validate()?;
    if ar.codebook_size() != prompt.codebook_size || nar.codebook_size() != prompt.codebook_size {
        return Err(Error::Incompatible(format!(
            "models use K = {} / {}, prompt uses {}",
            ar.codebook_size(),
            nar.codebook_size(),
            prompt.codebook_size
        )));
    }
    let ar_out = generate_ar(ar, condition, &prompt.layer_codes(0), config)?;
    if ar_out.codes.is_empty() {
        return Err(Error::EmptyGeneration(format!(
            "AR model emitted end-of-sequence after {} step(s)",
            ar_out.steps
        )));
    }
    let stream = if prompt.layers == 1 {
        let frames = ar_out.codes.iter().map(|&c| TokenFrame::new(vec![c])).collect();
        TokenStream::new(prompt.id.clone(), prompt.token_rate_hz, 1, prompt.codebook_size, frames)?
    } else {
        generate_nar(nar, condition, prompt, &ar_out.codes, prompt.layers)?
    };
    let stats = ArNarStats {
        ar_steps: ar_out.steps,
        nar_passes: prompt.layers - 1,
        hit_eos: ar_out.hit_eos,
    };
    Ok((stream, stats))
}

fn peaked(len: usize, at: usize, margin: f64) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[at] = margin;
    v
}

/// Emits a fixed code sequence, then EOS.
#[derive(Clone, Debug)]
pub struct OracleAr {
    pub codebook_size: usize,
    pub truth: Vec<usize>,
    pub margin: f64,
}

impl ArModel for OracleAr {
    fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    fn next_logits(&self, _: &[usize], _: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        let at = self.truth.get(prefix.len()).copied().unwrap_or(self.codebook_size);
        Ok(peaked(self.codebook_size + 1, at, self.margin))
    }
}

/// Peaks at `prefix.len() mod K` and never at EOS.
#[derive(Clone, Debug)]
pub struct CyclingAr {
    pub codebook_size: usize,
    pub margin: f64,
}

impl ArModel for CyclingAr {
    fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    fn next_logits(&self, _: &[usize], _: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(peaked(self.codebook_size + 1, prefix.len() % self.codebook_size, self.margin))
    }
}

/// Peaks at a hidden grid's codes. Frames past the hidden grid copy the
/// code of the layer below.
#[derive(Clone, Debug)]
pub struct OracleNar {
    pub codebook_size: usize,
    pub truth: Vec<TokenFrame>,
    pub margin: f64,
}

impl NarModel for OracleNar {
    fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    fn layer_logits(
        &self,
        _: &[usize],
        _: &TokenStream,
        decoded: &[Vec<usize>],
        target_layer: usize,
    ) -> Result<Array2<f64>> {
        let below = decoded
            .get(target_layer.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("layer {target_layer} requested early")))?;
        let mut out = Array2::zeros((below.len(), self.codebook_size));
        for (t, &prev) in below.iter().enumerate() {
            let at = match self.truth.get(t) {
                Some(f) => *f.codes.get(target_layer).ok_or_else(|| {
                    Error::InvalidArgument(format!("hidden grid lacks layer {target_layer}"))
                })?,
                None => prev,
            };
            out[[t, at]] = self.margin;
        }
        Ok(out)
    }
}

const BOS_OFFSET: usize = 1;
const LOG_FLOOR: f64 = -1e30;

#[derive(Clone, Debug, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<usize, u64>,
}

/// Add-k smoothed n-gram model over first-layer codes plus EOS.
///
/// Histories are left-padded with a begin symbol. A context never seen in
/// training backs off to its longest seen suffix.
#[derive(Clone, Debug)]
pub struct NgramAr {
    codebook_size: usize,
    order: usize,
    add_k: f64,
    /// `tables[l]` holds contexts of length `l`.
    tables: Vec<HashMap<Vec<usize>, ContextCounts>>,
}

pub fn train_ngram_ar(streams: &[TokenStream], order: usize, add_k: f64) -> Result<NgramAr> {
    if order == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if !(add_k >= 0.0 && add_k.is_finite()) {
        return Err(Error::InvalidArgument(format!("add-k must be non-negative, got {add_k}")));
    }
    let first = streams
        .first()
        .ok_or_else(|| Error::InsufficientData { needed: 1, got: 0 })?;
    let k = first.codebook_size;
    if streams.iter().any(|s| s.codebook_size != k) {
        return Err(Error::Incompatible("training streams mix codebook sizes".into()));
    }
    let bos = k + BOS_OFFSET;
    let mut tables = vec![HashMap::<Vec<usize>, ContextCounts>::new(); order];
    for s in streams {
        s.validate()?;
        let mut seq = vec![bos; order - 1];
        seq.extend(s.layer_codes(0));
        seq.push(k);
        for i in order - 1..seq.len() {
            let target = seq[i];
            for (len, table) in tables.iter_mut().enumerate() {
                let entry = table.entry(seq[i - len..i].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(target).or_default() += 1;
            }
        }
    }
    Ok(NgramAr {
        codebook_size: k,
        order,
        add_k,
        tables,
    })
}

impl NgramAr {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    fn history(&self, prompt: &[usize], prefix: &[usize]) -> Vec<usize> {
        let bos = self.codebook_size + BOS_OFFSET;
        let mut h = vec![bos; self.order - 1];
        h.extend_from_slice(prompt);
        h.extend_from_slice(prefix);
        h
    }

    /// Log-probabilities over codes and EOS after `history`.
    fn log_probs(&self, history: &[usize]) -> Vec<f64> {
        let vocab = self.codebook_size + 1;
        let mut len = self.order - 1;
        let counts = loop {
            let ctx = &history[history.len() - len..];
            match self.tables[len].get(ctx) {
                Some(c) if c.total > 0 => break c,
                _ if len == 0 => unreachable!("training always fills the empty context"),
                _ => len -= 1,
            }
        };
        let denom = counts.total as f64 + self.add_k * vocab as f64;
        let log = |c: f64| if c > 0.0 { (c / denom).ln() } else { LOG_FLOOR };
        let mut out = vec![log(self.add_k); vocab];
        for (&w, &c) in &counts.next {
            out[w] = log(c as f64 + self.add_k);
        }
        out
    }

    /// Per-symbol perplexity of `codes` followed by EOS.
    pub fn perplexity(&self, codes: &[usize]) -> f64 {
        let mut h = self.history(&[], &[]);
        let mut nll = 0.0;
        for &c in codes.iter().chain(std::iter::once(&self.codebook_size)) {
            nll -= self.log_probs(&h)[c];
            h.push(c);
        }
        (nll / (codes.len() + 1) as f64).exp()
    }
}

impl ArModel for NgramAr {
    fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    fn next_logits(&self, _: &[usize], prompt: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.log_probs(&self.history(prompt, prefix)))
    }
}

/// Synthetic token streams whose first layer uses exactly `support_size`
/// codes. Each next code follows a fixed successor of the previous code
/// with probability `0.7`, otherwise the next code of a cyclic sweep over
/// the support, so every support code appears once enough frames exist.
/// Higher layers are uniform over all `K` codes.
pub fn support_streams(
    count: usize,
    frames: usize,
    layers: usize,
    codebook_size: usize,
    support_size: usize,
    seed: u64,
) -> Result<(Vec<TokenStream>, Vec<usize>)> {
    if support_size == 0 || support_size > codebook_size {
        return Err(Error::InvalidArgument(format!(
            "support of {support_size} codes out of {codebook_size}"
        )));
    }
    if count * frames < support_size {
        return Err(Error::InsufficientData {
            needed: support_size,
            got: count * frames,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes: Vec<usize> = (0..codebook_size).collect();
    rand::seq::SliceRandom::shuffle(codes.as_mut_slice(), &mut rng);
    let support: Vec<usize> = codes[..support_size].to_vec();
    let successor: Vec<usize> = (0..support_size).map(|_| rng.random_range(0..support_size)).collect();
    let mut sweep = 0usize;
    let mut streams = Vec::with_capacity(count);
    for u in 0..count {
        let mut prev = sweep % support_size;
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            let idx = if rng.random::<f64>() < 0.7 {
                successor[prev]
            } else {
                sweep += 1;
                (sweep - 1) % support_size
            };
            let mut f = vec![support[idx]];
            f.extend((1..layers).map(|_| rng.random_range(0..codebook_size)));
            out.push(TokenFrame::new(f));
            prev = idx;
        }
        streams.push(TokenStream::new(format!("utt{u:05}"), 50.0, layers, codebook_size, out)?);
    }
    let mut sorted = support;
    sorted.sort_unstable();
    Ok((streams, sorted))
}

/// Share of `codes` outside `support` (a sorted code list).
pub fn out_of_support_rate(codes: &[usize], support: &[usize]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let outside = codes.iter().filter(|c| support.binary_search(c).is_err()).count();
    outside as f64 / codes.len() as f64
}
