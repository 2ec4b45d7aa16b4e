//! Seeded k-means used to initialize codebooks from residuals.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::linalg::{self, Matrix};

fn nearest(centroids: &Matrix, point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows {
        let d = linalg::squared_distance(centroids.row(k), point);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by `iters` Lloyd rounds.
///
/// Always ends on a centroid update, so the nearest-centroid error of the
/// result never exceeds the error of quantizing every point to the origin.
/// When there are fewer distinct points than `k`, the surplus centroids
/// duplicate existing ones.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut R) -> Matrix {
    assert!(!points.is_empty(), "k-means needs at least one point");
    assert!(k > 0);
    let dim = points[0].len();
    let mut centroids = Matrix::zeros(k, dim);

    let first = rng.random_range(0..points.len());
    centroids.row_mut(0).copy_from_slice(&points[first]);
    let mut dists: Vec<f64> = points
        .iter()
        .map(|p| linalg::squared_distance(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&dists) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.row_mut(c).copy_from_slice(&points[pick]);
        for (d, p) in dists.iter_mut().zip(points) {
            *d = d.min(linalg::squared_distance(p, centroids.row(c)));
        }
    }

    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for _ in 0..iters.max(1) {
        sums.data.iter_mut().for_each(|v| *v = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for p in points {
            let (c, _) = nearest(&centroids, p);
            linalg::axpy(1.0, p, sums.row_mut(c));
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
    }
    centroids
}
