//! Residual vector quantization toolkit.
//!
//! Single-layer VQ with EMA/restart updates and projected cosine lookup
//! ([`vq`]), the residual stack ([`rvq`]), quantizer training on vector
//! corpora ([`training`]), token statistics ([`analytics`]), and the two
//! codec-token generation schedulers: masked parallel decoding
//! ([`mlm`]) and AR+NAR layer-wise generation ([`arnar`]). Binary and
//! line-delimited file formats live in [`formats`].

pub mod analytics;
pub mod arnar;
pub mod error;
pub mod formats;
pub mod mlm;
pub mod rvq;
pub mod sampling;
pub mod training;
pub mod vq;

pub use error::{Error, Result};
pub use rvq::{EncodeTrace, RvqQuantizer, Scheme, TokenFrame, TokenStream};
pub use vq::{Codebook, Metric, ProjectionPair, VqAssignment};
