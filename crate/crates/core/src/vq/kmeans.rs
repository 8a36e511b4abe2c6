use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{squared_distance, Codebook, Metric};
use crate::error::{Error, Result};
use crate::sampling::draw;

/// Seeded k-means++ seeding followed by `iterations` Lloyd steps.
///
/// Clusters are formed under squared Euclidean distance regardless of
/// `metric`, which is only recorded on the returned codebook. EMA
/// statistics start at `(cluster size, cluster sum)` of the final
/// assignment. Empty clusters keep their previous centroid.
pub fn kmeans_init(
    data: ArrayView2<f64>,
    k: usize,
    iterations: usize,
    seed: u64,
    metric: Metric,
) -> Result<Codebook> {
    let (n, q) = data.dim();
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    let rows: Vec<&[f64]> = data
        .axis_iter(Axis(0))
        .map(|r| r.to_slice().ok_or_else(|| Error::InvalidArgument("k-means data must be row-contiguous".into())))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f64>::zeros((k, q));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut nearest: Vec<f64> = rows.iter().map(|r| squared_distance(r, rows[first])).collect();
    for c in 1..k {
        let pick = if nearest.iter().any(|&d| d > 0.0) {
            draw(&nearest, &mut rng)
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (d, r) in nearest.iter_mut().zip(&rows) {
            *d = d.min(squared_distance(r, rows[pick]));
        }
    }

    let mut assignment = assign(&rows, &centroids);
    for _ in 0..iterations {
        let (sizes, sums) = accumulate(data, &assignment, k);
        for c in 0..k {
            if sizes[c] > 0.0 {
                let mean = &sums.row(c) / sizes[c];
                centroids.row_mut(c).assign(&mean);
            }
        }
        let next = assign(&rows, &centroids);
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }
    let (sizes, sums) = accumulate(data, &assignment, k);
    Codebook::from_parts(centroids, sizes, sums, metric)
}

fn assign(rows: &[&[f64]], centroids: &Array2<f64>) -> Vec<usize> {
    let q = centroids.ncols();
    let flat = centroids.as_slice().expect("standard layout");
    rows.iter()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (c, e) in flat.chunks(q).enumerate() {
                let d = squared_distance(r, e);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

fn accumulate(data: ArrayView2<f64>, assignment: &[usize], k: usize) -> (Array1<f64>, Array2<f64>) {
    let mut sizes = Array1::zeros(k);
    let mut sums = Array2::zeros((k, data.ncols()));
    for (row, &c) in data.axis_iter(Axis(0)).zip(assignment) {
        sizes[c] += 1.0;
        let mut s = sums.row_mut(c);
        s += &row;
    }
    (sizes, sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn k_distinct_points_become_centroids() {
        let data = array![[0.0, 0.0], [4.0, 1.0], [-3.0, 2.0], [1.0, -5.0]];
        let cb = kmeans_init(data.view(), 4, 3, 9, Metric::Euclidean).unwrap();
        let mut got: Vec<Vec<f64>> = (0..4).map(|i| cb.entry(i).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = data.rows().into_iter().map(|r| r.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert_eq!(cb.ema_cluster_size().to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 500;
        let sigma = 1.0;
        let means = [[-20.0, 3.0], [15.0, -8.0]];
        let mut data = Array2::zeros((2 * n, 2));
        for b in 0..2 {
            for i in 0..n {
                for j in 0..2 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data[[b * n + i, j]] = means[b][j] + sigma * z;
                }
            }
        }
        let sample_means: Vec<Vec<f64>> = (0..2)
            .map(|b| {
                data.slice(ndarray::s![b * n..(b + 1) * n, ..])
                    .mean_axis(Axis(0))
                    .unwrap()
                    .to_vec()
            })
            .collect();
        let cb = kmeans_init(data.view(), 2, 10, 1, Metric::Euclidean).unwrap();
        let tol = 3.0 * sigma / (n as f64).sqrt();
        for m in &sample_means {
            let a = cb.nearest_code(m).unwrap();
            assert!(a.distance < tol, "centroid {:?} vs blob mean {m:?}", a.quantized);
        }
        // centroids sit on the sample means
        for i in 0..2 {
            let e = cb.entry(i);
            assert!(sample_means.iter().any(|m| squared_distance(m, e).sqrt() < 1e-9));
        }
    }

    #[test]
    fn seeded_determinism_and_errors() {
        let data = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let a = kmeans_init(data.view(), 5, 4, 42, Metric::Cosine).unwrap();
        let b = kmeans_init(data.view(), 5, 4, 42, Metric::Cosine).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metric(), Metric::Cosine);
        assert!(matches!(
            kmeans_init(data.view(), 51, 1, 0, Metric::Euclidean),
            Err(Error::InsufficientData { needed: 51, got: 50 })
        ));
    }

    #[test]
    fn duplicate_points_do_not_stall_seeding() {
        let data = array![[1.0], [1.0], [1.0], [2.0]];
        let cb = kmeans_init(data.view(), 3, 2, 0, Metric::Euclidean).unwrap();
        assert_eq!(cb.size(), 3);
        assert_eq!(cb.ema_cluster_size().sum(), 4.0);
    }
}
