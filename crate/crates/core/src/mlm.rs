//! Masked parallel generation over RVQ token grids.
//!
//! The first layer is decoded over a few rounds: every round scores the
//! grid with and without the condition, mixes the two with an annealed
//! guidance coefficient, samples every still-masked position and commits
//! the most confident blocks. The remaining layers are filled in one
//! greedy pass each, coarse to fine.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::{TokenFrame, TokenStream};
use crate::sampling::{argmax, draw, softmax};

/// Token grid of `frames x layers`; `None` marks a masked cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    frames: usize,
    layers: usize,
    cells: Vec<Option<usize>>,
}

impl TokenGrid {
    pub fn masked(frames: usize, layers: usize) -> Self {
        Self {
            frames,
            layers,
            cells: vec![None; frames * layers],
        }
    }

    pub fn from_stream(stream: &TokenStream) -> Self {
        let mut g = Self::masked(stream.len(), stream.layers);
        for (t, f) in stream.frames.iter().enumerate() {
            for (n, &c) in f.codes.iter().enumerate() {
                g.set(t, n, c);
            }
        }
        g
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, frame: usize, layer: usize) -> Option<usize> {
        self.cells[frame * self.layers + layer]
    }

    pub fn set(&mut self, frame: usize, layer: usize, code: usize) {
        self.cells[frame * self.layers + layer] = Some(code);
    }

    pub fn is_masked(&self, frame: usize, layer: usize) -> bool {
        self.get(frame, layer).is_none()
    }

    pub fn layer(&self, layer: usize) -> Vec<Option<usize>> {
        (0..self.frames).map(|t| self.get(t, layer)).collect()
    }

    pub fn masked_count(&self, layer: usize) -> usize {
        (0..self.frames).filter(|&t| self.is_masked(t, layer)).count()
    }

    /// Converts a fully decoded grid into frames.
    pub fn to_frames(&self) -> Result<Vec<TokenFrame>> {
        (0..self.frames)
            .map(|t| {
                (0..self.layers)
                    .map(|n| {
                        self.get(t, n).ok_or_else(|| {
                            Error::InvalidArgument(format!("cell ({t}, {n}) is still masked"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(TokenFrame::new)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuidanceMode {
    Conditional,
    Unconditional,
}

/// Decoding progress: the grid itself (masked cells are `None`), the
/// number of finished first-layer rounds and the confidence each committed
/// first-layer token was chosen with.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub grid: TokenGrid,
    pub prompt_frames: usize,
    pub iteration: usize,
    /// `None` for prompt frames and for positions not yet committed.
    pub confidence: Vec<Option<f64>>,
}

impl MaskState {
    /// Grid of `frames` frames with the prompt copied in and everything
    /// after it masked.
    pub fn new(prompt: &TokenStream, frames: usize) -> Result<Self> {
        if prompt.len() > frames {
            return Err(Error::InvalidArgument(format!(
                "prompt of {} frames does not fit in {frames}",
                prompt.len()
            )));
        }
        let mut grid = TokenGrid::masked(frames, prompt.layers);
        for (t, f) in prompt.frames.iter().enumerate() {
            for (n, &c) in f.codes.iter().enumerate() {
                grid.set(t, n, c);
            }
        }
        Ok(Self {
            grid,
            prompt_frames: prompt.len(),
            iteration: 0,
            confidence: vec![None; frames],
        })
    }

    /// Fixes a masked cell. Prompt cells and cells already committed are
    /// rejected.
    pub fn commit(&mut self, frame: usize, layer: usize, code: usize, confidence: Option<f64>) -> Result<()> {
        if frame < self.prompt_frames || !self.grid.is_masked(frame, layer) {
            return Err(Error::InvalidArgument(format!(
                "cell ({frame}, {layer}) is not masked"
            )));
        }
        self.grid.set(frame, layer, code);
        if layer == 0 {
            self.confidence[frame] = confidence;
        }
        Ok(())
    }
}

/// Source of per-position code logits.
///
/// Implementations must be deterministic and return finite values for
/// every masked position. Conditional and unconditional calls of one round
/// may run concurrently.
pub trait ScoreModel: Sync {
    fn codebook_size(&self) -> usize;

    /// Logits of shape `frames x K` for `target_layer`.
    fn score(
        &self,
        grid: &TokenGrid,
        target_layer: usize,
        condition: &[usize],
        mode: GuidanceMode,
    ) -> Result<Array2<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskSchedule {
    /// Masked share after round `t` of `I` is `cos(pi/2 * t/I)`.
    Cosine,
    /// Share of the positions committed in each round; sums to 1.
    Fractions(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    pub iterations_layer1: usize,
    pub mask_block_size: usize,
    pub cfg_start: f64,
    pub cfg_end: f64,
    pub temperature: f64,
    pub rng_seed: u64,
    pub unmask_schedule: UnmaskSchedule,
    /// With `false` no unconditional pass is made and the conditional
    /// logits are used as they are.
    pub unconditional_branch: bool,
}

impl Default for DecodeSchedule {
    fn default() -> Self {
        Self {
            iterations_layer1: 5,
            mask_block_size: 5,
            cfg_start: 0.0,
            cfg_end: 2.0,
            temperature: 1.0,
            rng_seed: 0,
            unmask_schedule: UnmaskSchedule::Cosine,
            unconditional_branch: true,
        }
    }
}

impl DecodeSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.iterations_layer1 == 0 {
            return fail("iterations_layer1 must be at least 1".into());
        }
        if self.mask_block_size == 0 {
            return fail("mask_block_size must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.cfg_start.is_finite() && self.cfg_end.is_finite()) {
            return fail("guidance coefficients must be finite".into());
        }
        if let UnmaskSchedule::Fractions(f) = &self.unmask_schedule {
            if f.len() != self.iterations_layer1 {
                return fail(format!(
                    "{} unmask fractions for {} iterations",
                    f.len(),
                    self.iterations_layer1
                ));
            }
            if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail("unmask fractions must be positive and sum to 1".into());
            }
        }
        Ok(())
    }
}

/// Bookkeeping of one generation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParallelStats {
    /// Conditional scoring passes over all layers.
    pub forward_passes: usize,
    pub unconditional_passes: usize,
    /// Layer-1 positions committed in each round.
    pub commits_per_iteration: Vec<usize>,
    /// Guidance coefficient used in each round.
    pub cfg_coefficients: Vec<f64>,
    /// Confidence of each committed first-layer token; `None` for prompt
    /// frames.
    pub confidence: Vec<Option<f64>>,
}

/// Span mask over `num_frames` positions built from aligned blocks of
/// `block_size` (the last block may be shorter). Blocks are drawn without
/// replacement until at least `mask_rate * num_frames` positions are masked.
pub fn span_mask(num_frames: usize, block_size: usize, mask_rate: f64, seed: u64) -> Vec<bool> {
    let block_size = block_size.max(1);
    let mut mask = vec![false; num_frames];
    let target = mask_rate.clamp(0.0, 1.0) * num_frames as f64;
    if target <= 0.0 {
        return mask;
    }
    let mut blocks: Vec<usize> = (0..num_frames.div_ceil(block_size)).collect();
    blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = 0usize;
    for b in blocks {
        if masked as f64 >= target - 1e-9 {
            break;
        }
        let end = ((b + 1) * block_size).min(num_frames);
        for m in &mut mask[b * block_size..end] {
            *m = true;
        }
        masked += end - b * block_size;
    }
    mask
}

/// Guidance coefficient after `progress` (fraction of committed tokens).
pub fn anneal_coeff(progress: f64, cfg_start: f64, cfg_end: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    cfg_start + p * (cfg_end - cfg_start)
}

/// `(1 + g) cond - g uncond`, evaluated as `cond + g (cond - uncond)`.
pub fn cfg_combine(
    cond: ArrayView2<f64>,
    uncond: ArrayView2<f64>,
    coeff: f64,
) -> Result<Array2<f64>> {
    if cond.dim() != uncond.dim() {
        return Err(Error::InvalidArgument(format!(
            "logit shapes differ: {:?} vs {:?}",
            cond.dim(),
            uncond.dim()
        )));
    }
    let mut out = cond.to_owned();
    out.zip_mut_with(&uncond, |c, &u| *c += coeff * (*c - u));
    Ok(out)
}

/// Positions of the `m` largest confidences, lower position on ties,
/// returned in ascending position order.
pub fn confidence_select(confidences: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > confidences.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} of {} positions",
            confidences.len()
        )));
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut picked = order[..m].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Units committed per round so that every round commits at least one and
/// the last round commits the rest. Runs `min(iterations, total)` rounds.
pub fn unmask_counts(total: usize, iterations: usize, schedule: &UnmaskSchedule) -> Vec<usize> {
    if total == 0 || iterations == 0 {
        return Vec::new();
    }
    let rounds = iterations.min(total);
    if rounds < iterations {
        return vec![1; total];
    }
    let cumulative_share = |t: usize| -> f64 {
        match schedule {
            UnmaskSchedule::Cosine => 1.0 - (FRAC_PI_2 * t as f64 / rounds as f64).cos(),
            UnmaskSchedule::Fractions(f) => f[..t].iter().sum(),
        }
    };
    let mut counts = Vec::with_capacity(rounds);
    let mut done = 0usize;
    for t in 1..=rounds {
        let target = if t == rounds {
            total
        } else {
            let raw = (total as f64 * cumulative_share(t)).round() as usize;
            raw.clamp(done + 1, total - (rounds - t))
        };
        counts.push(target - done);
        done = target;
    }
    counts
}

/// Runs masked parallel generation for `total_frames` frames. The prompt's
/// frames are copied to the front of the output unchanged.
pub fn generate_parallel<M: ScoreModel + ?Sized>(
    model: &M,
    condition: &[usize],
    prompt: &TokenStream,
    total_frames: usize,
    schedule: &DecodeSchedule,
) -> Result<(TokenStream, ParallelStats)> {
    schedule.validate()?;
    prompt.validate()?;
    let (k, n_layers, p) = (prompt.codebook_size, prompt.layers, prompt.len());
    if p >= total_frames {
        return Err(Error::InvalidArgument(format!(
            "prompt has {p} frames, which leaves nothing to generate in {total_frames}"
        )));
    }
    if model.codebook_size() != k {
        return Err(Error::Incompatible(format!(
            "model scores {} codes, prompt uses {k}",
            model.codebook_size()
        )));
    }

    let mut state = MaskState::new(prompt, total_frames)?;
    let mut stats = ParallelStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.rng_seed);

    let block = schedule.mask_block_size;
    let blocks: Vec<(usize, usize)> = (p..total_frames)
        .step_by(block)
        .map(|s| (s, (s + block).min(total_frames)))
        .collect();
    let generated = total_frames - p;
    let mut open: Vec<(usize, usize)> = blocks.clone();
    let counts = unmask_counts(
        blocks.len(),
        schedule.iterations_layer1,
        &schedule.unmask_schedule,
    );

    for &commit_blocks in &counts {
        let committed = generated - state.grid.masked_count(0);
        let coeff = anneal_coeff(
            committed as f64 / generated as f64,
            schedule.cfg_start,
            schedule.cfg_end,
        );
        let (cond, uncond) = if schedule.unconditional_branch {
            let (c, u) = rayon::join(
                || model.score(&state.grid, 0, condition, GuidanceMode::Conditional),
                || model.score(&state.grid, 0, condition, GuidanceMode::Unconditional),
            );
            (c?, Some(u?))
        } else {
            (model.score(&state.grid, 0, condition, GuidanceMode::Conditional)?, None)
        };
        stats.forward_passes += 1;
        check_logits(&cond, &state.grid, 0, k)?;
        let logits = match uncond {
            Some(u) => {
                stats.unconditional_passes += 1;
                check_logits(&u, &state.grid, 0, k)?;
                cfg_combine(cond.view(), u.view(), coeff)?
            }
            None => cond,
        };
        stats.cfg_coefficients.push(coeff);

        let mut sampled = vec![None; total_frames];
        for t in p..total_frames {
            if state.grid.is_masked(t, 0) {
                let row: Vec<f64> = logits.row(t).to_vec();
                let probs = softmax(&row, schedule.temperature);
                let code = draw(&probs, &mut rng);
                sampled[t] = Some((code, probs[code]));
            }
        }
        let confidences: Vec<f64> = open
            .iter()
            .map(|&(s, e)| {
                (s..e).map(|t| sampled[t].expect("open block is masked").1).sum::<f64>()
                    / (e - s) as f64
            })
            .collect();
        let picked = confidence_select(&confidences, commit_blocks)?;
        let mut newly = 0;
        for &i in &picked {
            let (s, e) = open[i];
            for t in s..e {
                let (code, conf) = sampled[t].expect("masked");
                state.commit(t, 0, code, Some(conf))?;
            }
            newly += e - s;
        }
        let mut i = 0;
        open.retain(|_| {
            let keep = picked.binary_search(&i).is_err();
            i += 1;
            keep
        });
        stats.commits_per_iteration.push(newly);
        state.iteration += 1;
    }
    debug_assert_eq!(state.grid.masked_count(0), 0);

    for n in 1..n_layers {
        let logits = model.score(&state.grid, n, condition, GuidanceMode::Conditional)?;
        stats.forward_passes += 1;
        check_logits(&logits, &state.grid, n, k)?;
        for t in p..total_frames {
            let row: Vec<f64> = logits.row(t).to_vec();
            state.commit(t, n, argmax(&row), None)?;
        }
    }

    stats.confidence = state.confidence.clone();
    let out = TokenStream::new(
        prompt.id.clone(),
        prompt.token_rate_hz,
        n_layers,
        k,
        state.grid.to_frames()?,
    )?;
    Ok((out, stats))
}

fn check_logits(logits: &Array2<f64>, grid: &TokenGrid, layer: usize, k: usize) -> Result<()> {
    if logits.dim() != (grid.frames(), k) {
        return Err(Error::DimensionMismatch {
            expected: grid.frames() * k,
            got: logits.len(),
        });
    }
    for t in 0..grid.frames() {
        if grid.is_masked(t, layer) && logits.row(t).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "model returned non-finite logits at frame {t}, layer {layer}"
            )));
        }
    }
    Ok(())
}

/// Toy model that peaks at a hidden ground-truth grid.
///
/// Conditional logits are `margin` at the true code plus seeded noise in
/// `[0, 1)`; unconditional logits are the noise alone.
#[derive(Clone, Debug)]
pub struct OracleScoreModel {
    truth: TokenStream,
    margin: f64,
    noise_seed: u64,
}

impl OracleScoreModel {
    pub fn new(truth: TokenStream, margin: f64, noise_seed: u64) -> Self {
        Self {
            truth,
            margin,
            noise_seed,
        }
    }

    pub fn truth(&self) -> &TokenStream {
        &self.truth
    }

    fn noise(&self, frames: usize, layer: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let k = self.truth.codebook_size;
        Array2::from_shape_fn((frames, k), |_| rng.random::<f64>())
    }
}

impl ScoreModel for OracleScoreModel {
    fn codebook_size(&self) -> usize {
        self.truth.codebook_size
    }

    fn score(
        &self,
        grid: &TokenGrid,
        target_layer: usize,
        _condition: &[usize],
        mode: GuidanceMode,
    ) -> Result<Array2<f64>> {
        if grid.frames() > self.truth.len() || target_layer >= self.truth.layers {
            return Err(Error::InvalidArgument(format!(
                "oracle knows {} frames x {} layers, asked for {} frames layer {target_layer}",
                self.truth.len(),
                self.truth.layers,
                grid.frames()
            )));
        }
        let mut logits = self.noise(grid.frames(), target_layer);
        if mode == GuidanceMode::Conditional {
            for t in 0..grid.frames() {
                logits[[t, self.truth.frames[t].codes[target_layer]]] += self.margin;
            }
        }
        Ok(logits)
    }
}

/// Toy model with flat logits.
#[derive(Clone, Copy, Debug)]
pub struct UniformScoreModel {
    pub codebook_size: usize,
}

impl ScoreModel for UniformScoreModel {
    fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    fn score(&self, grid: &TokenGrid, _: usize, _: &[usize], _: GuidanceMode) -> Result<Array2<f64>> {
        Ok(Array2::zeros((grid.frames(), self.codebook_size)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::sync::Mutex;

    #[test]
    fn span_mask_extremes() {
        assert!(span_mask(23, 5, 1.0, 1).iter().all(|&m| m));
        assert!(span_mask(23, 5, 0.0, 1).iter().all(|&m| !m));
    }

    #[test]
    fn span_mask_half_of_twenty() {
        for seed in 0..20 {
            let m = span_mask(20, 5, 0.5, seed);
            // enumerate aligned blocks: each is fully masked or fully clear
            let mut full = 0;
            for b in 0..4 {
                let blk = &m[b * 5..b * 5 + 5];
                assert!(blk.iter().all(|&x| x) || blk.iter().all(|&x| !x));
                full += blk[0] as usize;
            }
            assert_eq!(full, 2);
            assert_eq!(m.iter().filter(|&&x| x).count(), 10);
        }
        assert_eq!(span_mask(20, 5, 0.5, 3), span_mask(20, 5, 0.5, 3));
    }

    #[test]
    fn span_mask_short_tail_block() {
        let m = span_mask(7, 5, 1.0, 0);
        assert_eq!(m.len(), 7);
        let m = span_mask(7, 5, 0.2, 4);
        // one block suffices: either 5 or the 2-long tail
        let c = m.iter().filter(|&&x| x).count();
        assert!(c == 5 || c == 2);
    }

    #[test]
    fn anneal_endpoints() {
        assert_eq!(anneal_coeff(0.0, 0.0, 2.0), 0.0);
        assert_eq!(anneal_coeff(1.0, 0.0, 2.0), 2.0);
        assert_eq!(anneal_coeff(0.5, 0.0, 2.0), 1.0);
    }

    #[test]
    fn cfg_combine_cases() {
        let c = array![[2.0, 0.1, -3.0]];
        let u = array![[0.5, 0.7, 1.0]];
        assert_eq!(cfg_combine(c.view(), u.view(), 0.0).unwrap(), c);
        for g in [0.3, 1.0, 2.0, 7.5] {
            assert_eq!(cfg_combine(c.view(), c.view(), g).unwrap(), c);
        }
        assert_eq!(cfg_combine(c.view(), u.view(), 1.0).unwrap()[[0, 0]], 3.5);
        let bad = array![[1.0, 2.0]];
        assert!(cfg_combine(c.view(), bad.view(), 1.0).is_err());
    }

    #[test]
    fn confidence_selection() {
        assert_eq!(confidence_select(&[0.9, 0.2, 0.5], 1).unwrap(), vec![0]);
        assert_eq!(confidence_select(&[0.9, 0.2, 0.5], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(confidence_select(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(confidence_select(&[0.1, 0.5, 0.5], 2).unwrap(), vec![1, 2]);
        assert!(confidence_select(&[0.5], 2).is_err());
        assert!(confidence_select(&[0.5], 0).is_err());
    }

    #[test]
    fn unmask_counts_cover_everything() {
        for total in 1..60 {
            for it in 1..8 {
                let c = unmask_counts(total, it, &UnmaskSchedule::Cosine);
                assert_eq!(c.iter().sum::<usize>(), total);
                assert_eq!(c.len(), it.min(total));
                assert!(c.iter().all(|&x| x >= 1));
            }
        }
        let f = UnmaskSchedule::Fractions(vec![0.5, 0.25, 0.25]);
        assert_eq!(unmask_counts(8, 3, &f), vec![4, 2, 2]);
        // cosine front-loads little and finishes with the bulk
        let c = unmask_counts(100, 5, &UnmaskSchedule::Cosine);
        assert!(c[0] < c[4]);
    }

    #[test]
    fn schedule_validation() {
        assert!(DecodeSchedule::default().validate().is_ok());
        let bad = DecodeSchedule { iterations_layer1: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DecodeSchedule {
            unmask_schedule: UnmaskSchedule::Fractions(vec![0.5, 0.4]),
            iterations_layer1: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodeSchedule { temperature: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn random_truth(frames: usize, layers: usize, k: usize, seed: u64) -> TokenStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..frames)
            .map(|_| TokenFrame::new((0..layers).map(|_| rng.random_range(0..k)).collect()))
            .collect();
        TokenStream::new("truth", 50.0, layers, k, frames).unwrap()
    }

    fn prompt_of(truth: &TokenStream, p: usize) -> TokenStream {
        TokenStream::new("p", truth.token_rate_hz, truth.layers, truth.codebook_size, truth.frames[..p].to_vec())
            .unwrap()
    }

    #[test]
    fn forward_pass_accounting() {
        let truth = random_truth(40, 8, 16, 0);
        let model = OracleScoreModel::new(truth.clone(), 30.0, 1);
        let (_, stats) =
            generate_parallel(&model, &[], &prompt_of(&truth, 0), 40, &DecodeSchedule::default())
                .unwrap();
        assert_eq!(stats.forward_passes, 12);
        assert_eq!(stats.unconditional_passes, 5);
        assert_eq!(stats.cfg_coefficients[0], 0.0);
        assert_eq!(stats.commits_per_iteration.iter().sum::<usize>(), 40);
    }

    #[test]
    fn oracle_recovers_truth_with_prompt() {
        let truth = random_truth(30, 3, 32, 5);
        let model = OracleScoreModel::new(truth.clone(), 40.0, 2);
        let prompt = prompt_of(&truth, 7);
        let (out, _) =
            generate_parallel(&model, &[1, 2, 3], &prompt, 30, &DecodeSchedule::default()).unwrap();
        assert_eq!(out.frames, truth.frames);
        assert_eq!(&out.frames[..7], &prompt.frames[..]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let truth = random_truth(10, 2, 8, 0);
        let model = OracleScoreModel::new(truth.clone(), 40.0, 2);
        let s = DecodeSchedule::default();
        assert!(generate_parallel(&model, &[], &prompt_of(&truth, 10), 10, &s).is_err());
        let wrong_k = UniformScoreModel { codebook_size: 9 };
        assert!(generate_parallel(&wrong_k, &[], &prompt_of(&truth, 2), 10, &s).is_err());
    }

    struct NanModel;
    impl ScoreModel for NanModel {
        fn codebook_size(&self) -> usize {
            4
        }
        fn score(&self, g: &TokenGrid, _: usize, _: &[usize], _: GuidanceMode) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((g.frames(), 4), f64::NAN))
        }
    }

    #[test]
    fn non_finite_logits_abort() {
        let prompt = TokenStream::new("p", 50.0, 2, 4, vec![]).unwrap();
        assert!(matches!(
            generate_parallel(&NanModel, &[], &prompt, 5, &DecodeSchedule::default()),
            Err(Error::NonFinite(_))
        ));
    }

    /// Records every grid a model sees.
    struct Recording<M> {
        inner: M,
        seen: Mutex<Vec<(usize, GuidanceMode, TokenGrid)>>,
    }

    impl<M: ScoreModel> ScoreModel for Recording<M> {
        fn codebook_size(&self) -> usize {
            self.inner.codebook_size()
        }
        fn score(&self, g: &TokenGrid, n: usize, c: &[usize], m: GuidanceMode) -> Result<Array2<f64>> {
            self.seen.lock().unwrap().push((n, m, g.clone()));
            self.inner.score(g, n, c, m)
        }
    }

    #[test]
    fn commitment_is_monotone_and_layers_causal() {
        let truth = random_truth(33, 4, 16, 9);
        let p = 4;
        let model = Recording {
            inner: UniformScoreModel { codebook_size: 16 },
            seen: Mutex::new(Vec::new()),
        };
        let (out, stats) =
            generate_parallel(&model, &[], &prompt_of(&truth, p), 33, &DecodeSchedule::default())
                .unwrap();
        let seen = model.seen.into_inner().unwrap();
        let layer1: Vec<&TokenGrid> = seen
            .iter()
            .filter(|(n, m, _)| *n == 0 && *m == GuidanceMode::Conditional)
            .map(|(_, _, g)| g)
            .collect();
        assert_eq!(layer1.len(), 5);
        let mut prev_masked = usize::MAX;
        for g in &layer1 {
            let masked = g.masked_count(0);
            assert!(masked < prev_masked);
            prev_masked = masked;
            // once unmasked a position stays fixed
        }
        for w in layer1.windows(2) {
            for t in 0..33 {
                if let Some(c) = w[0].get(t, 0) {
                    assert_eq!(w[1].get(t, 0), Some(c));
                }
            }
        }
        for (n, _, g) in &seen {
            for t in p..33 {
                for upper in n + 1..4 {
                    assert!(g.is_masked(t, upper));
                }
                for lower in 0..*n {
                    assert!(!g.is_masked(t, lower));
                }
            }
            for t in 0..p {
                assert!((0..4).all(|l| !g.is_masked(t, l)));
            }
        }
        assert_eq!(stats.commits_per_iteration.iter().sum::<usize>(), 29);
        assert_eq!(out.len(), 33);
    }

    #[test]
    fn zero_guidance_matches_disabled_branch() {
        let truth = random_truth(25, 3, 8, 1);
        let model = OracleScoreModel::new(truth.clone(), 1.0, 3);
        let prompt = prompt_of(&truth, 3);
        let with = DecodeSchedule { cfg_start: 0.0, cfg_end: 0.0, rng_seed: 4, ..Default::default() };
        let without = DecodeSchedule { unconditional_branch: false, ..with.clone() };
        let (a, sa) = generate_parallel(&model, &[], &prompt, 25, &with).unwrap();
        let (b, sb) = generate_parallel(&model, &[], &prompt, 25, &without).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.forward_passes, sb.forward_passes);
        assert_eq!(sb.unconditional_passes, 0);
    }

    #[test]
    fn mask_state_protects_prompt_and_commits() {
        let prompt = TokenStream::new("p", 50.0, 2, 4, vec![TokenFrame::new(vec![1, 2])]).unwrap();
        let mut st = MaskState::new(&prompt, 3).unwrap();
        assert!(st.commit(0, 0, 3, None).is_err());
        st.commit(1, 0, 3, Some(0.5)).unwrap();
        assert!(st.commit(1, 0, 2, Some(0.9)).is_err());
        assert_eq!(st.confidence, vec![None, Some(0.5), None]);
        assert_eq!(st.grid.masked_count(0), 1);
        assert!(MaskState::new(&prompt, 0).is_err());
    }

    #[test]
    fn confidences_recorded_for_generated_frames() {
        let truth = random_truth(20, 2, 8, 4);
        let model = OracleScoreModel::new(truth.clone(), 40.0, 1);
        let (_, stats) =
            generate_parallel(&model, &[], &prompt_of(&truth, 5), 20, &DecodeSchedule::default()).unwrap();
        assert!(stats.confidence[..5].iter().all(Option::is_none));
        assert!(stats.confidence[5..].iter().all(|c| c.is_some_and(|v| v > 0.99)));
    }

    #[test]
    fn deterministic_per_seed() {
        let truth = random_truth(25, 3, 8, 1);
        let model = OracleScoreModel::new(truth.clone(), 0.5, 3);
        let prompt = prompt_of(&truth, 2);
        let s = DecodeSchedule { rng_seed: 11, ..Default::default() };
        let a = generate_parallel(&model, &[], &prompt, 25, &s).unwrap();
        let b = generate_parallel(&model, &[], &prompt, 25, &s).unwrap();
        assert_eq!(a, b);
    }
}
