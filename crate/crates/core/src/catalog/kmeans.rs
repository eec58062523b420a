//! Seeded k-means with k-means++ initialisation and capped Lloyd iterations.

use rand::Rng;
use rayon::prelude::*;

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid. Ties resolve to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (idx, c) in centroids.iter().enumerate() {
        let dist = squared_distance(c, x);
        if dist < best.1 {
            best = (idx, dist);
        }
    }
    best
}

/// Centroid indices sorted by ascending distance to `x`, ties by index.
pub fn ranked_centroids(centroids: &[Vec<f64>], x: &[f64]) -> Vec<usize> {
    let dists: Vec<f64> = centroids.iter().map(|c| squared_distance(c, x)).collect();
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    order
}

/// Mean squared distance of the points from their mean.
pub fn total_variance(points: &[Vec<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let dim = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    points.iter().map(|p| squared_distance(p, &mean)).sum::<f64>() / n
}

pub fn kmeans_pp_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (idx, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    chosen = idx;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

#[derive(Debug, Clone)]
pub struct LloydOutcome {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd iterations from fixed initial centroids. Empty clusters keep their
/// previous centroid.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iters: usize) -> LloydOutcome {
    let dim = points[0].len();
    let k = init.len();
    let mut centroids = init;
    let mut assignments: Vec<usize> = points.par_iter().map(|p| nearest(&centroids, p).0).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let next: Vec<usize> = points.par_iter().map(|p| nearest(&centroids, p).0).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    LloydOutcome {
        centroids,
        assignments,
        iterations,
        converged,
    }
}

pub fn fit<R: Rng>(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut R) -> LloydOutcome {
    let init = kmeans_pp_init(points, k, rng);
    lloyd(points, init, max_iters)
}
