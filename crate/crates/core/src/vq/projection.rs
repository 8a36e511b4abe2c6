use ndarray::{Array2, ArrayView1};

use crate::error::{check_dim, Error, Result};

/// Linear maps between the latent space (dimension `d`) and the
/// low-dimensional quantization space (dimension `q`).
///
/// `proj_in` is `d x q` and `proj_out` is `q x d`; vectors are rows, so
/// `project_in(x) = x . proj_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPair {
    proj_in: Array2<f64>,
    proj_out: Array2<f64>,
}

impl ProjectionPair {
    pub fn new(proj_in: Array2<f64>, proj_out: Array2<f64>) -> Result<Self> {
        let (d, q) = proj_in.dim();
        if q == 0 || d < q {
            return Err(Error::InvalidArgument(format!(
                "projection must map d >= q >= 1, got d={d} q={q}"
            )));
        }
        if proj_out.dim() != (q, d) {
            return Err(Error::InvalidArgument(format!(
                "proj_out shape {:?} must be {q}x{d}",
                proj_out.dim()
            )));
        }
        if proj_in.iter().chain(proj_out.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection weight".into()));
        }
        Ok(Self {
            proj_in: proj_in.as_standard_layout().into_owned(),
            proj_out: proj_out.as_standard_layout().into_owned(),
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(Array2::eye(dim), Array2::eye(dim))
    }

    pub fn latent_dim(&self) -> usize {
        self.proj_in.nrows()
    }

    pub fn quant_dim(&self) -> usize {
        self.proj_in.ncols()
    }

    pub fn proj_in(&self) -> &Array2<f64> {
        &self.proj_in
    }

    pub fn proj_out(&self) -> &Array2<f64> {
        &self.proj_out
    }

    pub(crate) fn proj_in_mut(&mut self) -> &mut Array2<f64> {
        &mut self.proj_in
    }

    pub(crate) fn proj_out_mut(&mut self) -> &mut Array2<f64> {
        &mut self.proj_out
    }

    pub fn project_in(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.latent_dim(), x.len())?;
        Ok(ArrayView1::from(x).dot(&self.proj_in).to_vec())
    }

    pub fn project_out(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.quant_dim(), y.len())?;
        Ok(ArrayView1::from(y).dot(&self.proj_out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_projection() {
        let p = ProjectionPair::identity(3).unwrap();
        assert_eq!(p.project_in(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        assert_eq!(p.project_out(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn selects_leading_coordinates() {
        let proj_in = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        let p = ProjectionPair::new(proj_in.clone(), proj_in.t().to_owned()).unwrap();
        assert_eq!(p.project_in(&[3.0, 5.0, 7.0, 9.0]).unwrap(), vec![3.0, 5.0]);
        assert_eq!(p.project_out(&[3.0, 5.0]).unwrap(), vec![3.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        assert!(ProjectionPair::new(Array2::zeros((2, 3)), Array2::zeros((3, 2))).is_err());
        assert!(ProjectionPair::new(Array2::zeros((3, 2)), Array2::zeros((3, 2))).is_err());
        let p = ProjectionPair::new(Array2::zeros((3, 2)), Array2::zeros((2, 3))).unwrap();
        assert!(matches!(
            p.project_in(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(p.project_out(&[1.0, 2.0, 3.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn project_in_is_linear(
                w in proptest::collection::vec(-2.0f64..2.0, 12),
                x in proptest::collection::vec(-5.0f64..5.0, 4),
                y in proptest::collection::vec(-5.0f64..5.0, 4),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
            ) {
                let proj_in = Array2::from_shape_vec((4, 3), w.clone()).unwrap();
                let p = ProjectionPair::new(proj_in.clone(), proj_in.t().to_owned()).unwrap();
                let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
                let lhs = p.project_in(&mix).unwrap();
                let px = p.project_in(&x).unwrap();
                let py = p.project_in(&y).unwrap();
                for j in 0..3 {
                    let rhs = a * px[j] + b * py[j];
                    prop_assert!((lhs[j] - rhs).abs() <= 1e-6 * (1.0 + rhs.abs()));
                }
            }
        }
    }
}
