//! Lloyd's algorithm with k-means++ seeding, computed in `f64`.

use log::warn;
use rand::Rng as _;

use crate::rng::{self, tag};
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<S> {
    /// `k x dim`, row-major.
    pub centroids: Vec<S>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// True when fewer distinct seeds than `k` existed and centroids were
    /// filled by duplicating points.
    pub padded: bool,
}

impl<S: Scalar> KMeans<S> {
    pub fn centroid(&self, j: usize, dim: usize) -> &[S] {
        &self.centroids[j * dim..(j + 1) * dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Clusters `points` (`n x dim`, row-major) into `k` groups.
///
/// Fewer than `k` points are not an error: every point becomes a centroid
/// and the rest are duplicated from the points, with a warning.
pub fn kmeans<S: Scalar>(points: &[S], dim: usize, k: usize, seed: u64, max_iters: usize) -> KMeans<S> {
    assert!(dim > 0 && k > 0 && points.len() % dim == 0);
    let pts: Vec<Vec<f64>> = points.chunks_exact(dim).map(|p| p.iter().map(|v| v.f64()).collect()).collect();
    let n = pts.len();
    assert!(n > 0, "kmeans needs at least one point");
    let mut rng = rng::stream(seed, tag::KMEANS, k as u64);

    let finish = |centroids: Vec<Vec<f64>>, assignments: Vec<usize>, iterations: usize, padded: bool| KMeans {
        centroids: centroids.iter().flatten().map(|&v| S::of(v)).collect(),
        assignments,
        iterations,
        padded,
    };

    if n < k {
        warn!("kmeans: {n} points for {k} clusters; duplicating points to pad centroids");
        let centroids: Vec<Vec<f64>> = (0..k).map(|j| pts[j % n].clone()).collect();
        let assignments = pts.iter().map(|p| nearest(p, &centroids).0).collect();
        return finish(centroids, assignments, 0, true);
    }

    // k-means++ seeding
    let mut centroids = vec![pts[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    let mut padded = false;
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            padded = true;
            centroids.len() % n
        };
        let c = pts[pick].clone();
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    if padded {
        warn!("kmeans: fewer than {k} distinct points; centroids duplicated");
    }

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, p) in pts.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            dist[i] = d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in pts.iter().zip(&assignments) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    taken[i] = true;
                    centroids[j] = pts[i].clone();
                }
            }
        }
    }
    finish(centroids, assignments, iterations, padded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_locations_two_clusters() {
        let mut pts = Vec::new();
        for i in 0..20 {
            pts.extend_from_slice(if i % 3 == 0 { &[1.0, 2.0] } else { &[-4.0, 0.5] });
        }
        let r = kmeans::<f64>(&pts, 2, 2, 7, DEFAULT_MAX_ITERS);
        let mut cs: Vec<Vec<f64>> = r.centroids.chunks(2).map(|c| c.to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![-4.0, 0.5], vec![1.0, 2.0]]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = [0.0, 1.0, 2.0, 3.0, 4.0, 8.0];
        let r = kmeans::<f64>(&pts, 2, 1, 0, DEFAULT_MAX_ITERS);
        assert!((r.centroids[0] - 2.0).abs() < 1e-12);
        assert!((r.centroids[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_pads_by_duplication() {
        let pts = [1.0, 1.0, 2.0, 2.0];
        let r = kmeans::<f64>(&pts, 2, 4, 0, DEFAULT_MAX_ITERS);
        assert!(r.padded);
        assert_eq!(r.centroids, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn identical_points_give_identical_centroids() {
        let pts: Vec<f64> = (0..50).flat_map(|_| [0.5, -0.25, 3.0]).collect();
        let r = kmeans::<f64>(&pts, 3, 4, 1, DEFAULT_MAX_ITERS);
        assert!(r.padded);
        for j in 0..4 {
            assert_eq!(r.centroid(j, 3), &[0.5, -0.25, 3.0]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let pts: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        assert_eq!(kmeans::<f64>(&pts, 2, 5, 3, 100), kmeans::<f64>(&pts, 2, 5, 3, 100));
    }
}
