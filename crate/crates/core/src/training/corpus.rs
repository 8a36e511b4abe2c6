use std::path::PathBuf;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::formats;

/// Where training vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSpec {
    /// Unit-variance Gaussian components with means drawn uniformly from
    /// `[-separation, separation]^dims`.
    GaussianMixture {
        num_components: usize,
        dims: usize,
        separation: f64,
        count: usize,
        seed: u64,
    },
    /// A vector file (see [`formats::read_vectors`]).
    File { path: PathBuf },
}

/// A generated mixture with its hidden structure.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub data: Array2<f64>,
    pub means: Array2<f64>,
    pub labels: Vec<usize>,
}

pub fn make_mixture(
    num_components: usize,
    dims: usize,
    separation: f64,
    count: usize,
    seed: u64,
) -> Result<Mixture> {
    if num_components == 0 || dims == 0 {
        return Err(Error::InvalidArgument(
            "mixture needs at least one component and one dimension".into(),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "mixture separation must be positive, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = Array2::from_shape_fn((num_components, dims), |_| {
        rng.random_range(-1.0..1.0) * separation
    });
    let mut labels = Vec::with_capacity(count);
    let mut data = Array2::zeros((count, dims));
    for i in 0..count {
        let c = rng.random_range(0..num_components);
        labels.push(c);
        for j in 0..dims {
            let z: f64 = StandardNormal.sample(&mut rng);
            data[[i, j]] = means[[c, j]] + z;
        }
    }
    Ok(Mixture {
        data,
        means,
        labels,
    })
}

pub fn make_corpus(spec: &CorpusSpec) -> Result<Array2<f64>> {
    match spec {
        CorpusSpec::GaussianMixture {
            num_components,
            dims,
            separation,
            count,
            seed,
        } => Ok(make_mixture(*num_components, *dims, *separation, *count, *seed)?.data),
        CorpusSpec::File { path } => formats::read_vectors(path),
    }
}

/// Parses `mixture:components=512,dims=64,separation=4,count=16384,seed=0`
/// or `file:PATH`. Omitted mixture keys take the defaults shown in
/// [`CorpusSpec::default_mixture`].
impl FromStr for CorpusSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(CorpusSpec::File { path: path.into() });
        }
        let body = s
            .strip_prefix("mixture")
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corpus spec {s:?}")))?;
        let body = body.strip_prefix(':').unwrap_or(body);
        let mut spec = Self::default_mixture();
        let CorpusSpec::GaussianMixture {
            num_components,
            dims,
            separation,
            count,
            seed,
        } = &mut spec
        else {
            unreachable!()
        };
        for kv in body.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {kv:?}")))?;
            let bad = |_| Error::InvalidArgument(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "components" => *num_components = v.trim().parse().map_err(bad)?,
                "dims" => *dims = v.trim().parse().map_err(bad)?,
                "count" => *count = v.trim().parse().map_err(bad)?,
                "seed" => *seed = v.trim().parse().map_err(bad)?,
                "separation" => {
                    *separation = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad value for {k}: {v:?}")))?
                }
                other => {
                    return Err(Error::InvalidArgument(format!("unknown corpus key {other:?}")))
                }
            }
        }
        Ok(spec)
    }
}

impl CorpusSpec {
    pub fn default_mixture() -> Self {
        CorpusSpec::GaussianMixture {
            num_components: 512,
            dims: 64,
            separation: 4.0,
            count: 16384,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    #[test]
    fn mixture_is_reproducible() {
        let spec = CorpusSpec::GaussianMixture {
            num_components: 5,
            dims: 16,
            separation: 3.0,
            count: 1000,
            seed: 12,
        };
        let a = make_corpus(&spec).unwrap();
        let b = make_corpus(&spec).unwrap();
        assert_eq!(a.dim(), (1000, 16));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn single_component_sample_mean() {
        let n = 1000;
        let m = make_mixture(1, 16, 2.0, n, 4).unwrap();
        let mean = m.data.mean_axis(Axis(0)).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for j in 0..16 {
            assert!((mean[j] - m.means[[0, j]]).abs() < bound);
        }
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn parses_spec_strings() {
        let s: CorpusSpec = "mixture:components=8,dims=4,separation=2.5,count=100,seed=3"
            .parse()
            .unwrap();
        assert_eq!(
            s,
            CorpusSpec::GaussianMixture {
                num_components: 8,
                dims: 4,
                separation: 2.5,
                count: 100,
                seed: 3
            }
        );
        assert_eq!("mixture".parse::<CorpusSpec>().unwrap(), CorpusSpec::default_mixture());
        assert_eq!(
            "file:/tmp/x.rvqv".parse::<CorpusSpec>().unwrap(),
            CorpusSpec::File { path: "/tmp/x.rvqv".into() }
        );
        assert!("mixture:bogus=1".parse::<CorpusSpec>().is_err());
        assert!("mixture:dims=x".parse::<CorpusSpec>().is_err());
        assert!("gauss".parse::<CorpusSpec>().is_err());
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(make_mixture(0, 4, 1.0, 10, 0).is_err());
        assert!(make_mixture(2, 4, 0.0, 10, 0).is_err());
    }
}
