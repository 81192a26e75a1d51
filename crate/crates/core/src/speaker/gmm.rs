//! Diagonal-covariance GMM universal background model and Baum-Welch statistics.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor as a fraction of the global per-dimension variance.
pub const VARIANCE_FLOOR_RELATIVE: f64 = 1e-4;
/// EM iterations run after each binary split before the next one.
pub const SPLIT_ITERATIONS: usize = 4;
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmUbm {
    pub weights: Array1<f64>,
    /// `K x feat_dim`.
    pub means: Array2<f64>,
    /// `K x feat_dim`, diagonal.
    pub variances: Array2<f64>,
    pub variance_floor: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub ubm: GmmUbm,
    /// Total log-likelihood of the pooled frames at the start of each final EM iteration,
    /// plus one entry for the final model.
    pub log_likelihood: Vec<f64>,
}

/// Zeroth and centered first-order statistics of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchStats {
    /// Soft frame counts per component.
    pub n: Array1<f64>,
    /// `K x feat_dim`, `sum_t gamma_k(t) (x_t - m_k)`.
    pub f: Array2<f64>,
}

impl BaumWelchStats {
    pub fn zeros(n_components: usize, feat_dim: usize) -> Self {
        Self {
            n: Array1::zeros(n_components),
            f: Array2::zeros((n_components, feat_dim)),
        }
    }

    /// First-order statistics flattened component-major into a supervector.
    pub fn f_supervector(&self) -> Array1<f64> {
        self.f.iter().cloned().collect()
    }

    pub fn total_frames(&self) -> f64 {
        self.n.sum()
    }
}

struct Accum {
    loglik: f64,
    n: Array1<f64>,
    sx: Array2<f64>,
    sxx: Array2<f64>,
}

impl GmmUbm {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.means.ncols()
    }

    /// Per-component log densities `log w_k + log N(x | m_k, v_k)`.
    fn component_log_densities(&self, x: ArrayView1<f64>, consts: &Array1<f64>) -> Vec<f64> {
        (0..self.n_components())
            .map(|k| {
                let m = self.means.row(k);
                let v = self.variances.row(k);
                let mut q = 0.0;
                for d in 0..x.len() {
                    let e = x[d] - m[d];
                    q += e * e / v[d];
                }
                consts[k] - 0.5 * q
            })
            .collect()
    }

    fn log_consts(&self) -> Array1<f64> {
        let dim = self.feat_dim() as f64;
        Array1::from_shape_fn(self.n_components(), |k| {
            let logdet: f64 = self.variances.row(k).iter().map(|v| v.ln()).sum();
            self.weights[k].max(f64::MIN_POSITIVE).ln()
                - 0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + logdet)
        })
    }

    /// Responsibilities of one frame and its log-likelihood.
    fn posteriors(&self, x: ArrayView1<f64>, consts: &Array1<f64>) -> (Vec<f64>, f64) {
        let mut lp = self.component_log_densities(x, consts);
        let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lp.iter().map(|l| (l - max).exp()).sum();
        let ll = max + sum.ln();
        for l in lp.iter_mut() {
            *l = (*l - ll).exp();
        }
        (lp, ll)
    }

    /// Total log-likelihood of `frames`.
    pub fn log_likelihood(&self, frames: ArrayView2<f64>) -> f64 {
        self.accumulate(frames, false).loglik
    }

    fn accumulate(&self, frames: ArrayView2<f64>, second_order: bool) -> Accum {
        let consts = self.log_consts();
        let (k, d) = (self.n_components(), self.feat_dim());
        let chunks: Vec<Accum> = (0..frames.nrows().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = frames.slice(s![c * CHUNK..((c + 1) * CHUNK).min(frames.nrows()), ..]);
                let mut acc = Accum {
                    loglik: 0.0,
                    n: Array1::zeros(k),
                    sx: Array2::zeros((k, d)),
                    sxx: Array2::zeros((k, d)),
                };
                for x in rows.rows() {
                    let (post, ll) = self.posteriors(x, &consts);
                    acc.loglik += ll;
                    for (j, &g) in post.iter().enumerate() {
                        acc.n[j] += g;
                        acc.sx.row_mut(j).scaled_add(g, &x);
                        if second_order {
                            acc.sxx.row_mut(j).scaled_add(g, &x.mapv(|v| v * v));
                        }
                    }
                }
                acc
            })
            .collect();
        // fixed-order reduction keeps results independent of the thread count
        let mut total = Accum {
            loglik: 0.0,
            n: Array1::zeros(k),
            sx: Array2::zeros((k, d)),
            sxx: Array2::zeros((k, d)),
        };
        for a in chunks {
            total.loglik += a.loglik;
            total.n += &a.n;
            total.sx += &a.sx;
            total.sxx += &a.sxx;
        }
        total
    }

    /// One EM iteration; returns the log-likelihood under the parameters before the update.
    fn em_step(&mut self, frames: ArrayView2<f64>) -> f64 {
        let acc = self.accumulate(frames, true);
        let total: f64 = acc.n.sum();
        for k in 0..self.n_components() {
            let nk = acc.n[k];
            if nk <= 1e-10 * total {
                // starved component keeps its parameters and a negligible weight
                self.weights[k] = nk / total;
                continue;
            }
            self.weights[k] = nk / total;
            for d in 0..self.feat_dim() {
                let mean = acc.sx[[k, d]] / nk;
                let var = acc.sxx[[k, d]] / nk - mean * mean;
                self.means[[k, d]] = mean;
                self.variances[[k, d]] = var.max(self.variance_floor[d]);
            }
        }
        let wsum = self.weights.sum();
        self.weights /= wsum;
        acc.loglik
    }

    /// Doubles the component count (or splits the heaviest components up to `target`).
    fn split(&mut self, target: usize) {
        let k = self.n_components();
        let extra = (target - k).min(k);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        let mut weights = self.weights.to_vec();
        let mut means = self.means.clone();
        let mut vars = self.variances.clone();
        for &j in order.iter().take(extra) {
            let sd = self.variances.row(j).mapv(f64::sqrt);
            let offset = &sd * 0.2;
            let up = &self.means.row(j) + &offset;
            let down = &self.means.row(j) - &offset;
            means.row_mut(j).assign(&up);
            means.push_row(down.view()).expect("row width");
            vars.push_row(self.variances.row(j)).expect("row width");
            weights[j] *= 0.5;
            weights.push(weights[j]);
        }
        self.weights = Array1::from(weights);
        self.means = means;
        self.variances = vars;
    }

    /// Statistics of `frames` (`T x feat_dim`) against this UBM.
    pub fn accumulate_stats(&self, frames: ArrayView2<f64>) -> Result<BaumWelchStats> {
        if frames.ncols() != self.feat_dim() && frames.nrows() > 0 {
            return Err(Error::DimensionMismatch(format!(
                "features have dimension {}, UBM expects {}",
                frames.ncols(),
                self.feat_dim()
            )));
        }
        let mut stats = BaumWelchStats::zeros(self.n_components(), self.feat_dim());
        if frames.nrows() == 0 {
            return Ok(stats);
        }
        let acc = self.accumulate(frames, false);
        stats.n = acc.n;
        stats.f = acc.sx;
        for k in 0..self.n_components() {
            let shift = &self.means.row(k) * stats.n[k];
            let mut row = stats.f.row_mut(k);
            row -= &shift;
        }
        Ok(stats)
    }
}

/// Free-function form of [`GmmUbm::accumulate_stats`].
pub fn accumulate_stats(ubm: &GmmUbm, frames: ArrayView2<f64>) -> Result<BaumWelchStats> {
    ubm.accumulate_stats(frames)
}

/// Stacks feature matrices into one frame pool.
pub fn pool_frames(features: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    let nonempty: Vec<_> = features.iter().filter(|f| f.nrows() > 0).cloned().collect();
    if nonempty.is_empty() {
        return Err(Error::EmptyInput);
    }
    ndarray::concatenate(Axis(0), &nonempty).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// EM training by binary splitting from the global Gaussian, then `iters` final iterations.
pub fn train_ubm(features: &[ArrayView2<f64>], k: usize, iters: usize) -> Result<UbmTraining> {
    let frames = pool_frames(features)?;
    if k == 0 || k > frames.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{k} components requested for {} frames",
            frames.nrows()
        )));
    }
    let n = frames.nrows() as f64;
    let mean = frames.mean_axis(Axis(0)).expect("non-empty");
    let var = frames.map_axis(Axis(0), |c| c.iter().map(|v| v * v).sum::<f64>() / n)
        - mean.mapv(|m| m * m);
    let floor = var.mapv(|v| (v * VARIANCE_FLOOR_RELATIVE).max(1e-12));
    let var = Array1::from_shape_fn(var.len(), |d| var[d].max(floor[d]));
    let mut ubm = GmmUbm {
        weights: Array1::ones(1),
        means: mean.insert_axis(Axis(0)),
        variances: var.insert_axis(Axis(0)),
        variance_floor: floor,
    };
    while ubm.n_components() < k {
        ubm.split(k);
        for _ in 0..SPLIT_ITERATIONS {
            ubm.em_step(frames.view());
        }
    }
    let mut log_likelihood = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        log_likelihood.push(ubm.em_step(frames.view()));
    }
    log_likelihood.push(ubm.log_likelihood(frames.view()));
    Ok(UbmTraining {
        ubm,
        log_likelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_blobs(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        Array2::from_shape_fn((n, 2), |(i, d)| {
            let centre = if i % 2 == 0 { [-3.0, 1.0] } else { [4.0, -2.0] };
            centre[d] + noise.sample(&mut rng)
        })
    }

    #[test]
    fn single_component_is_global_gaussian() {
        let x = two_blobs(400, 1);
        let t = train_ubm(&[x.view()], 1, 3).unwrap();
        let n = x.nrows() as f64;
        for d in 0..2 {
            let col = x.column(d);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((t.ubm.means[[0, d]] - mean).abs() < 1e-9);
            assert!((t.ubm.variances[[0, d]] - var).abs() < 1e-9);
        }
        assert_eq!(t.ubm.weights[0], 1.0);
    }

    #[test]
    fn recovers_two_separated_means() {
        let x = two_blobs(2000, 2);
        let t = train_ubm(&[x.view()], 2, 20).unwrap();
        let mut means: Vec<[f64; 2]> = t
            .ubm
            .means
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1]])
            .collect();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (m, truth) in means.iter().zip([[-3.0, 1.0], [4.0, -2.0]]) {
            assert!(
                (m[0] - truth[0]).abs() < 0.1 && (m[1] - truth[1]).abs() < 0.1,
                "{m:?}"
            );
        }
        assert!((t.ubm.weights.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centres = [[0.0, 0.0, 0.0], [3.0, -1.0, 2.0], [-2.0, 4.0, 1.0]];
        let x = Array2::from_shape_fn((1500, 3), |(i, d)| {
            centres[i % 3][d] + noise.sample(&mut rng)
        });
        let t = train_ubm(&[x.view()], 5, 20).unwrap();
        for w in t.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{w:?}");
        }
        assert!(t.ubm.variances.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn too_many_components_rejected() {
        let x = Array2::zeros((3, 2));
        assert!(train_ubm(&[x.view()], 4, 1).is_err());
        assert!(train_ubm(&[], 1, 1).is_err());
    }

    #[test]
    fn stats_single_component_and_empty() {
        let x = two_blobs(50, 5);
        let ubm = train_ubm(&[x.view()], 1, 1).unwrap().ubm;
        let s = ubm.accumulate_stats(x.view()).unwrap();
        assert!((s.n[0] - 50.0).abs() < 1e-12);
        for d in 0..2 {
            let oracle: f64 = x.column(d).iter().map(|v| v - ubm.means[[0, d]]).sum();
            assert!((s.f[[0, d]] - oracle).abs() < 1e-9);
        }
        let empty = ubm.accumulate_stats(Array2::zeros((0, 2)).view()).unwrap();
        assert_eq!(empty, BaumWelchStats::zeros(1, 2));
        assert!(ubm.accumulate_stats(Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn responsibilities_concentrate_on_matching_component() {
        let ubm = GmmUbm {
            weights: ndarray::array![0.5, 0.5],
            means: ndarray::array![[0.0, 0.0], [5.0, 5.0]],
            variances: ndarray::array![[1e-3, 1e-3], [1e-3, 1e-3]],
            variance_floor: ndarray::array![1e-6, 1e-6],
        };
        let x = Array2::from_shape_fn((10, 2), |_| 5.0);
        let s = ubm.accumulate_stats(x.view()).unwrap();
        assert!((s.n[1] - 10.0).abs() < 1e-12);
        assert!(s.n[0] < 1e-12);
    }
}
