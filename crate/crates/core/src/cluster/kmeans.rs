//! Spherical (cosine-distance) K-means with k-means++ seeding and restarts.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// `k x D`, unit rows.
    pub centroids: Array2<f64>,
    /// Sum over points of `1 - <x, centroid>`.
    pub total_cost: f64,
    /// Cost after each assignment step of the winning restart.
    pub cost_history: Vec<f64>,
    pub restart: usize,
}

fn unit_rows(points: ArrayView2<f64>) -> Array2<f64> {
    let mut x = points.to_owned();
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    x
}

fn cosine_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    (1.0 - a.dot(&b)).max(0.0)
}

/// Nearest centroid by cosine similarity. Exact ties keep `current` if it is among the best,
/// otherwise the lowest index wins.
fn nearest(x: ndarray::ArrayView1<f64>, centroids: &Array2<f64>, current: Option<usize>) -> usize {
    let sims: Vec<f64> = centroids.rows().into_iter().map(|c| c.dot(&x)).collect();
    let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if let Some(c) = current {
        if sims[c] == best {
            return c;
        }
    }
    sims.iter().position(|&s| s == best).unwrap_or(0)
}

fn total_cost(x: &Array2<f64>, centroids: &Array2<f64>, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| cosine_distance(x.row(i), centroids.row(c)))
        .sum()
}

fn plus_plus_init(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| cosine_distance(x.row(i), x.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(cosine_distance(x.row(i), x.row(pick)));
        }
    }
    centroids
}

/// One Lloyd run from a k-means++ start drawn with `seed`. `points` must be unit rows.
pub fn kmeans_single(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let x = unit_rows(points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&x, k, &mut rng);
    let mut labels: Vec<usize> = (0..n)
        .map(|i| nearest(x.row(i), &centroids, None))
        .collect();
    let mut history = vec![total_cost(&x, &centroids, &labels)];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        // M-step: normalized member sums
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &x.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            let norm = sums.row(c).dot(&sums.row(c)).sqrt();
            if counts[c] > 0 && norm > 0.0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / norm));
            } else if counts[c] > 0 {
                // members cancel out exactly; keep the previous direction
            } else {
                // empty cluster: take over the point farthest from its centroid among clusters
                // that can spare one
                let far = (0..n).filter(|&i| counts[labels[i]] > 1).max_by(|&a, &b| {
                    let da = cosine_distance(x.row(a), centroids.row(labels[a]));
                    let db = cosine_distance(x.row(b), centroids.row(labels[b]));
                    da.total_cmp(&db).then(b.cmp(&a))
                });
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    centroids.row_mut(c).assign(&x.row(i));
                }
            }
        }
        let next: Vec<usize> = (0..n)
            .map(|i| nearest(x.row(i), &centroids, Some(labels[i])))
            .collect();
        let stable = next == labels;
        labels = next;
        history.push(total_cost(&x, &centroids, &labels));
        if stable {
            break;
        }
    }
    let total_cost = *history.last().expect("non-empty");
    Ok(ClusterAssignment {
        labels,
        centroids,
        total_cost,
        cost_history: history,
        restart: 0,
    })
}

/// Seed of restart `r` in the stream derived from `seed`.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed ^ (r as u64)
        .wrapping_add(1)
        .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Best of `restarts` independent runs by total cost; ties go to the lowest restart index.
pub fn kmeans_cosine(
    points: ArrayView2<f64>,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let runs = (0..restarts)
        .into_par_iter()
        .map(|r| {
            kmeans_single(points, k, restart_seed(seed, r)).map(|mut a| {
                a.restart = r;
                a
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(runs
        .into_iter()
        .reduce(|best, a| {
            if a.total_cost < best.total_cost {
                a
            } else {
                best
            }
        })
        .expect("at least one restart"))
}
