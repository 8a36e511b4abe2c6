//! Loss and analytic gradients for gradient-trained projected quantizers.
//!
//! For one latent `x` and layers `n = 1..N`:
//!
//! ```text
//! r_1 = x
//! z_n = r_n . proj_in_n                      (quantization space)
//! c_n = entries_n[k_n]                       (k_n from cosine lookup of z_n)
//! s_n = straight_through(z_n, c_n)           (value c_n, Jacobian I w.r.t. z_n)
//! r_{n+1} = r_n - s_n . proj_out_n
//! ```
//!
//! `loss = |r_{N+1}|^2 / d + w_cb * sum_n |c_n - sg(z_n)|^2 / q
//!       + beta * sum_n |z_n - sg(c_n)|^2 / q`, averaged over the batch.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::rvq::RvqQuantizer;

/// Straight-through estimator around a quantization step.
///
/// The forward value is the quantized vector; sensitivities pass to the
/// latent unchanged. The offset `quantized - latent` is held fixed, so
/// [`StraightThrough::forward_at`] evaluates the composite at a perturbed
/// latent the way autodiff sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct StraightThrough {
    quantized: Vec<f64>,
    offset: Vec<f64>,
}

impl StraightThrough {
    pub fn new(latent: &[f64], quantized: &[f64]) -> Result<Self> {
        check_dim(latent.len(), quantized.len())?;
        Ok(Self {
            quantized: quantized.to_vec(),
            offset: quantized.iter().zip(latent).map(|(q, z)| q - z).collect(),
        })
    }

    pub fn value(&self) -> &[f64] {
        &self.quantized
    }

    pub fn forward_at(&self, latent: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.offset.len(), latent.len())?;
        Ok(latent.iter().zip(&self.offset).map(|(z, o)| z + o).collect())
    }

    /// Gradient with respect to the latent given the upstream gradient with
    /// respect to the output.
    pub fn backward(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.offset.len(), upstream.len())?;
        Ok(upstream.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Gradients per layer, shaped like the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGradients {
    pub proj_in: Vec<Array2<f64>>,
    pub entries: Vec<Array2<f64>>,
    pub proj_out: Vec<Array2<f64>>,
}

/// Code indices as `[layer][row]`.
pub type Assignments = Vec<Vec<usize>>;

struct SampleForward {
    /// r_1 .. r_{N+1}
    residuals: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    codes: Vec<usize>,
}

/// Loss, gradients and the assignments used. With `frozen = Some(a)` the
/// lookup is skipped and `a` is used instead.
pub fn loss_and_gradients(
    quantizer: &RvqQuantizer,
    batch: ArrayView2<f64>,
    weights: LossWeights,
    frozen: Option<&[Vec<usize>]>,
) -> Result<(LossBreakdown, ProjectedGradients, Assignments)> {
    let projections = quantizer
        .projections()
        .ok_or_else(|| Error::InvalidArgument("gradient training needs a projected quantizer".into()))?;
    let layers = quantizer.layers();
    let (d, q, n_layers, k) = (
        quantizer.latent_dim(),
        quantizer.quant_dim(),
        quantizer.num_layers(),
        quantizer.codebook_size(),
    );
    check_dim(d, batch.ncols())?;
    let b = batch.nrows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(f) = frozen {
        check_dim(n_layers, f.len())?;
        for layer in f {
            check_dim(b, layer.len())?;
            if let Some(&bad) = layer.iter().find(|&&c| c >= k) {
                return Err(Error::IndexOutOfRange { index: bad, size: k });
            }
        }
    }

    let rows: Vec<Vec<f64>> = batch.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let forwards: Vec<SampleForward> = rows
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut residuals = Vec::with_capacity(n_layers + 1);
            let mut zs = Vec::with_capacity(n_layers);
            let mut codes = Vec::with_capacity(n_layers);
            let mut r = x.clone();
            for n in 0..n_layers {
                let z = projections[n].project_in(&r)?;
                let code = match frozen {
                    Some(f) => f[n][i],
                    None => layers[n].nearest_index(&z)?.0,
                };
                let back = projections[n].project_out(layers[n].entry(code))?;
                residuals.push(r.clone());
                for (ri, o) in r.iter_mut().zip(&back) {
                    *ri -= o;
                }
                zs.push(z);
                codes.push(code);
            }
            residuals.push(r);
            Ok(SampleForward {
                residuals,
                z: zs,
                codes,
            })
        })
        .collect::<Result<_>>()?;

    let mut grads = ProjectedGradients {
        proj_in: vec![Array2::zeros((d, q)); n_layers],
        entries: vec![Array2::zeros((k, q)); n_layers],
        proj_out: vec![Array2::zeros((q, d)); n_layers],
    };
    let mut loss = LossBreakdown::default();
    let bf = b as f64;
    let rec_scale = 2.0 / (bf * d as f64);
    let q_scale = 2.0 / (bf * q as f64);

    // sequential accumulation in row order keeps the sums reproducible
    for fw in &forwards {
        let last = &fw.residuals[n_layers];
        loss.reconstruction += last.iter().map(|v| v * v).sum::<f64>() / (bf * d as f64);
        let mut g_r: Vec<f64> = last.iter().map(|v| rec_scale * v).collect();
        for n in (0..n_layers).rev() {
            let a_mat = projections[n].proj_in();
            let b_mat = projections[n].proj_out();
            let c = layers[n].entry(fw.codes[n]);
            let z = &fw.z[n];
            let r = &fw.residuals[n];

            let diff2: f64 = z.iter().zip(c).map(|(zi, ci)| (ci - zi) * (ci - zi)).sum();
            loss.codebook += weights.codebook * diff2 / (bf * q as f64);
            loss.commitment += weights.commitment * diff2 / (bf * q as f64);

            // r_{n+1} = r_n - s_n B_n, with s_n = c_n at the current point
            let mut g_z = vec![0.0; q];
            {
                let gb = &mut grads.proj_out[n];
                for a in 0..q {
                    let mut acc = 0.0;
                    for j in 0..d {
                        gb[[a, j]] -= c[a] * g_r[j];
                        acc += b_mat[[a, j]] * g_r[j];
                    }
                    g_z[a] = -acc + weights.commitment * q_scale * (z[a] - c[a]);
                }
            }
            {
                let ga = &mut grads.proj_in[n];
                for i in 0..d {
                    let mut acc = 0.0;
                    for a in 0..q {
                        ga[[i, a]] += r[i] * g_z[a];
                        acc += a_mat[[i, a]] * g_z[a];
                    }
                    g_r[i] += acc;
                }
            }
            let mut ge = grads.entries[n].row_mut(fw.codes[n]);
            for a in 0..q {
                ge[a] += weights.codebook * q_scale * (c[a] - z[a]);
            }
        }
    }
    loss.total = loss.reconstruction + loss.codebook + loss.commitment;

    let mut assignments = vec![Vec::with_capacity(b); n_layers];
    for fw in &forwards {
        for (n, &c) in fw.codes.iter().enumerate() {
            assignments[n].push(c);
        }
    }
    Ok((loss, grads, assignments))
}

/// Plain gradient descent step.
pub fn apply_gradients(
    quantizer: &mut RvqQuantizer,
    grads: &ProjectedGradients,
    learning_rate: f64,
) -> Result<()> {
    let (layers, projections) = quantizer.parts_mut();
    let projections = projections
        .ok_or_else(|| Error::InvalidArgument("gradient step needs a projected quantizer".into()))?;
    for (n, (layer, pair)) in layers.iter_mut().zip(projections.iter_mut()).enumerate() {
        layer
            .entries_mut()
            .scaled_add(-learning_rate, &grads.entries[n]);
        pair.proj_in_mut().scaled_add(-learning_rate, &grads.proj_in[n]);
        pair.proj_out_mut().scaled_add(-learning_rate, &grads.proj_out[n]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_through_contract() {
        let z = [0.1, -0.7, 2.0];
        let c = [0.3, 0.2, 1.5];
        let st = StraightThrough::new(&z, &c).unwrap();
        assert_eq!(st.value(), &c);
        let up = [1.0, -2.0, 0.5];
        assert_eq!(st.backward(&up).unwrap(), up.to_vec());
        let moved = st.forward_at(&[0.2, -0.7, 2.0]).unwrap();
        assert!((moved[0] - 0.4).abs() < 1e-12);
        assert!(StraightThrough::new(&z, &c[..2]).is_err());
    }

    /// MSE head on a straight-through output: gradient w.r.t. the latent
    /// equals gradient w.r.t. the quantized value.
    #[test]
    fn straight_through_mse_gradient() {
        let z = [0.4, -1.1];
        let c = [0.5, -1.0];
        let target = [1.0, 2.0];
        let st = StraightThrough::new(&z, &c).unwrap();
        let g_q: Vec<f64> = c.iter().zip(&target).map(|(q, t)| 2.0 * (q - t)).collect();
        assert_eq!(st.backward(&g_q).unwrap(), g_q);
    }

    /// Linear head `w . st(z)` checked against central differences.
    #[test]
    fn straight_through_linear_head_fd() {
        let z = [0.4, -1.1, 0.25];
        let c = [0.5, -1.0, 0.0];
        let w = [1.5, -0.5, 2.0];
        let st = StraightThrough::new(&z, &c).unwrap();
        let f = |zz: &[f64]| -> f64 {
            let y = st.forward_at(zz).unwrap();
            let s: f64 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
            s * s
        };
        let y0: f64 = c.iter().zip(&w).map(|(a, b)| a * b).sum();
        let upstream: Vec<f64> = w.iter().map(|wi| 2.0 * y0 * wi).collect();
        let analytic = st.backward(&upstream).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            let mut p = z;
            let mut m = z;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-3 * analytic[i].abs().max(1e-8));
        }
    }
}
