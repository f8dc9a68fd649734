//! Seeded k-means with k-means++ initialization and a fixed iteration count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::par;
use crate::tensor::Tensor;

pub const KMEANS_ITERS: usize = 50;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for each point; ties go to the lowest centroid index.
fn assign(points: &Tensor, centroids: &Tensor) -> Vec<(usize, f64)> {
    par::map_indexed(points.rows(), |i| {
        let p = points.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..centroids.rows() {
            let d = sq_dist(p, centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    })
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Tensor,
    pub labels: Vec<usize>,
}

/// k-means++ seeding followed by exactly `iters` Lloyd iterations. An
/// empty cluster is re-seeded with the member of the currently largest
/// cluster farthest from that cluster's centroid.
pub fn kmeans(points: &Tensor, k: usize, iters: usize, seed: u64) -> KMeans {
    let n = points.rows();
    assert!(k >= 1 && k <= n, "k = {k} with {n} points");
    let dim = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Tensor::zeros(k, dim);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }

    let mut labels = vec![0; n];
    for _ in 0..iters {
        let a = assign(points, &centroids);
        for (l, (c, _)) in labels.iter_mut().zip(&a) {
            *l = *c;
        }
        let mut dists: Vec<f64> = a.iter().map(|(_, d)| *d).collect();
        // Re-seed empty clusters deterministically.
        loop {
            let mut counts = vec![0usize; k];
            for &l in &labels {
                counts[l] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let largest = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            let far = (0..n)
                .filter(|&i| labels[i] == largest)
                .fold(None, |b: Option<usize>, i| match b {
                    Some(j) if dists[j] >= dists[i] => Some(j),
                    _ => Some(i),
                })
                .expect("largest cluster is non-empty");
            labels[far] = empty;
            dists[far] = 0.0;
            centroids.row_mut(empty).copy_from_slice(points.row(far));
        }
        let mut sums = Tensor::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, p) in sums.row_mut(labels[i]).iter_mut().zip(points.row(i)) {
                *s += p;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    let a = assign(points, &centroids);
    let labels = a.into_iter().map(|(c, _)| c).collect();
    KMeans { centroids, labels }
}
