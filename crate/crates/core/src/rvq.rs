//! Residual vector quantization over a stack of codebooks.
//!
//! Plain scheme: each layer quantizes what the previous layers left over,
//! `Q_n = VQ(Q_0 - sum_{i<n} Q_i)`. Projected scheme: every layer owns a
//! [`ProjectionPair`]; the residual is projected into that layer's
//! quantization space, looked up there (typically under cosine distance),
//! and mapped back with `proj_out` before being subtracted.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::vq::{norm, Codebook, Metric, ProjectionPair, VqAssignment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Plain,
    Projected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqQuantizer {
    layers: Vec<Codebook>,
    projections: Option<Vec<ProjectionPair>>,
    latent_dim: usize,
}

impl RvqQuantizer {
    /// Plain stack: every layer quantizes directly in the latent space.
    pub fn plain(layers: Vec<Codebook>) -> Result<Self> {
        let (_, q, _) = check_layers(&layers)?;
        Ok(Self {
            layers,
            projections: None,
            latent_dim: q,
        })
    }

    pub fn projected(layers: Vec<Codebook>, projections: Vec<ProjectionPair>) -> Result<Self> {
        let (_, q, _) = check_layers(&layers)?;
        check_dim(layers.len(), projections.len())?;
        let d = projections[0].latent_dim();
        for p in &projections {
            check_dim(q, p.quant_dim())?;
            check_dim(d, p.latent_dim())?;
        }
        Ok(Self {
            layers,
            projections: Some(projections),
            latent_dim: d,
        })
    }

    pub fn scheme(&self) -> Scheme {
        if self.projections.is_some() {
            Scheme::Projected
        } else {
            Scheme::Plain
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.layers[0].size()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn quant_dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn metric(&self) -> Metric {
        self.layers[0].metric()
    }

    pub fn layers(&self) -> &[Codebook] {
        &self.layers
    }

    pub fn projections(&self) -> Option<&[ProjectionPair]> {
        self.projections.as_deref()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Codebook] {
        &mut self.layers
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Codebook], Option<&mut [ProjectionPair]>) {
        (&mut self.layers, self.projections.as_deref_mut())
    }

    /// Greedy residual encoding of one latent vector.
    pub fn encode(&self, latent: &[f64]) -> Result<(TokenFrame, EncodeTrace)> {
        check_dim(self.latent_dim, latent.len())?;
        let mut residual = latent.to_vec();
        let mut codes = Vec::with_capacity(self.num_layers());
        let mut trace = EncodeTrace {
            residual_norms: Vec::with_capacity(self.num_layers()),
            assignments: Vec::with_capacity(self.num_layers()),
            final_residual: Vec::new(),
        };
        for (n, layer) in self.layers.iter().enumerate() {
            match &self.projections {
                None => {
                    let a = layer.nearest_code(&residual)?;
                    for (r, c) in residual.iter_mut().zip(&a.quantized) {
                        *r -= c;
                    }
                    trace.residual_norms.push(norm(&residual));
                    codes.push(a.index);
                    trace.assignments.push(a);
                }
                Some(projections) => {
                    let pair = &projections[n];
                    let z = pair.project_in(&residual)?;
                    let a = layer.nearest_code(&z)?;
                    let q_residual: Vec<f64> =
                        z.iter().zip(&a.quantized).map(|(x, c)| x - c).collect();
                    trace.residual_norms.push(norm(&q_residual));
                    let out = pair.project_out(&a.quantized)?;
                    for (r, o) in residual.iter_mut().zip(&out) {
                        *r -= o;
                    }
                    codes.push(a.index);
                    trace.assignments.push(a);
                }
            }
        }
        trace.final_residual = residual;
        Ok((TokenFrame { codes }, trace))
    }

    /// Encodes every row; rows run in parallel, output keeps row order.
    pub fn encode_batch(&self, latents: ArrayView2<f64>) -> Result<Vec<TokenFrame>> {
        check_dim(self.latent_dim, latents.ncols())?;
        let rows: Vec<Vec<f64>> = latents.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        rows.par_iter()
            .map(|r| self.encode(r).map(|(frame, _)| frame))
            .collect()
    }

    pub fn decode(&self, frame: &TokenFrame) -> Result<Vec<f64>> {
        check_dim(self.num_layers(), frame.codes.len())?;
        self.decode_prefix(frame, self.num_layers())
    }

    /// Reconstruction from the first `layers` codes of `frame` only.
    pub fn decode_prefix(&self, frame: &TokenFrame, layers: usize) -> Result<Vec<f64>> {
        if layers > self.num_layers() || layers > frame.codes.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot decode {layers} layers from a {}-layer frame of a {}-layer quantizer",
                frame.codes.len(),
                self.num_layers()
            )));
        }
        let k = self.codebook_size();
        let mut out = vec![0.0; self.latent_dim];
        for (n, &code) in frame.codes.iter().take(layers).enumerate() {
            if code >= k {
                return Err(Error::IndexOutOfRange { index: code, size: k });
            }
            let entry = self.layers[n].entry(code);
            match &self.projections {
                None => out.iter_mut().zip(entry).for_each(|(o, e)| *o += e),
                Some(p) => {
                    let back = p[n].project_out(entry)?;
                    out.iter_mut().zip(&back).for_each(|(o, e)| *o += e);
                }
            }
        }
        Ok(out)
    }

    pub fn decode_batch(&self, frames: &[TokenFrame]) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = frames
            .par_iter()
            .map(|f| self.decode(f))
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros((rows.len(), self.latent_dim));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
        }
        Ok(out)
    }

    pub fn bitrate_bps(&self, token_rate_hz: f64) -> f64 {
        bitrate_bps(self.num_layers(), self.codebook_size(), token_rate_hz)
    }
}

fn check_layers(layers: &[Codebook]) -> Result<(usize, usize, Metric)> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidArgument("quantizer needs at least one layer".into()))?;
    let shape = (first.size(), first.dim(), first.metric());
    for (n, l) in layers.iter().enumerate() {
        if (l.size(), l.dim(), l.metric()) != shape {
            return Err(Error::Incompatible(format!(
                "layer {n} is {}x{} {:?}, layer 0 is {}x{} {:?}",
                l.size(),
                l.dim(),
                l.metric(),
                shape.0,
                shape.1,
                shape.2
            )));
        }
    }
    Ok(shape)
}

/// Bits needed to address one of `codebook_size` codes: `ceil(log2 K)`.
pub fn bits_per_code(codebook_size: usize) -> u32 {
    match codebook_size {
        0 | 1 => 0,
        k => usize::BITS - (k - 1).leading_zeros(),
    }
}

/// `layers * ceil(log2 K) * token_rate_hz`.
pub fn bitrate_bps(num_layers: usize, codebook_size: usize, token_rate_hz: f64) -> f64 {
    num_layers as f64 * bits_per_code(codebook_size) as f64 * token_rate_hz
}

/// Smallest layer count whose bitrate reaches `target_bps`.
pub fn layers_for_bitrate(target_bps: f64, codebook_size: usize, token_rate_hz: f64) -> usize {
    let per_layer = bitrate_bps(1, codebook_size, token_rate_hz);
    (target_bps / per_layer).ceil() as usize
}

/// Codes of one time step, coarse layer first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenFrame {
    pub codes: Vec<usize>,
}

impl TokenFrame {
    pub fn new(codes: Vec<usize>) -> Self {
        Self { codes }
    }
}

/// One utterance worth of token frames plus rate metadata. Serialized as a
/// single JSON line by [`crate::formats`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStream {
    pub id: String,
    pub token_rate_hz: f64,
    pub layers: usize,
    pub codebook_size: usize,
    #[serde(rename = "codes")]
    pub frames: Vec<TokenFrame>,
}

impl TokenStream {
    pub fn new(
        id: impl Into<String>,
        token_rate_hz: f64,
        layers: usize,
        codebook_size: usize,
        frames: Vec<TokenFrame>,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            token_rate_hz,
            layers,
            codebook_size,
            frames,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.token_rate_hz > 0.0 && self.token_rate_hz.is_finite()) {
            return Err(Error::Format(format!(
                "stream {:?}: token rate must be positive, got {}",
                self.id, self.token_rate_hz
            )));
        }
        if self.layers == 0 || self.codebook_size == 0 {
            return Err(Error::Format(format!(
                "stream {:?}: layers and codebook_size must be positive",
                self.id
            )));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.codes.len() != self.layers {
                return Err(Error::Format(format!(
                    "stream {:?} frame {t}: {} codes, expected {}",
                    self.id,
                    f.codes.len(),
                    self.layers
                )));
            }
            if let Some(&c) = f.codes.iter().find(|&&c| c >= self.codebook_size) {
                return Err(Error::Format(format!(
                    "stream {:?} frame {t}: code {c} >= codebook size {}",
                    self.id, self.codebook_size
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Codes of `layer` across all frames.
    pub fn layer_codes(&self, layer: usize) -> Vec<usize> {
        self.frames.iter().map(|f| f.codes[layer]).collect()
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames.len() as f64 / self.token_rate_hz
    }
}

/// Per-layer diagnostics from [`RvqQuantizer::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeTrace {
    /// Norm of the residual left after each layer. Latent-space residual for
    /// the plain scheme; quantization-space `||proj_in(r) - code||` for the
    /// projected scheme.
    pub residual_norms: Vec<f64>,
    pub assignments: Vec<VqAssignment>,
    /// Latent-space residual after the last layer; equals
    /// `latent - decode(frame)` up to accumulation order.
    pub final_residual: Vec<f64>,
}
