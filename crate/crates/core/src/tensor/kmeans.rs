//! Lloyd's k-means with greedy k-means++ seeding.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `k × d`
    pub centroids: Tensor,
    /// Inertia after seeding and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one entry")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
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

/// Draws an index with probability proportional to `weights`.
fn weighted_pick(rng: &mut rng::Stream, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn seed_centroids(pts: &[&[f64]], k: usize, rng: &mut rng::Stream) -> Vec<Vec<f64>> {
    let n = pts.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![pts[rng.random_range(0..n)].to_vec()];
    let mut closest: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        // greedy variant: sample several candidates, keep the one that
        // lowers the potential the most
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weighted_pick(rng, &closest);
            let updated: Vec<f64> = pts
                .iter()
                .zip(&closest)
                .map(|(p, &d)| d.min(sq_dist(p, pts[cand])))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(bp, _, _)| potential < *bp) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, idx, updated) = best.expect("trials >= 2");
        centroids.push(pts[idx].to_vec());
        closest = updated;
    }
    centroids
}

/// Clusters the rows of `points` (`n × d`) into `k` groups.
///
/// Deterministic for a given `seed`. Empty clusters are re-seeded with the
/// point farthest from its current centroid.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if points.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "kmeans expects n×d points, got {:?}",
            points.shape()
        )));
    }
    let n = points.rows();
    let d = points.cols();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "kmeans needs n >= k >= 1 (n={n}, k={k})"
        )));
    }
    let pts: Vec<&[f64]> = (0..n).map(|i| points.row(i)).collect();
    let mut rng = rng::stream(seed, "kmeans", k as u64);
    let mut centroids = seed_centroids(&pts, k, &mut rng);

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        pts.iter().map(|p| nearest(p, centroids)).unzip()
    };
    let (mut assignments, mut dists) = assign(&centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                centroids[j] = pts[far].to_vec();
            }
        }
        let (next, next_dists) = assign(&centroids);
        history.push(next_dists.iter().sum());
        let converged = next == assignments;
        assignments = next;
        dists = next_dists;
        if converged {
            break;
        }
    }

    let flat = centroids.into_iter().flatten().collect();
    Ok(KMeansResult {
        assignments,
        centroids: Tensor::new(&[k, d], flat)?,
        inertia_history: history,
        iterations,
    })
}
