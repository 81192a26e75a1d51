//! Total variability model `M = m + T w` and i-vector extraction.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gmm::{BaumWelchStats, GmmUbm};
use super::linalg::{from_na, spd_inverse, spd_solve, symmetrize, to_na};
use crate::error::{Error, Result};

/// Ridge added to the M-step normal equations.
pub const TV_RIDGE: f64 = 1e-10;

pub type IVector = Array1<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalVariabilityModel {
    /// UBM mean supervector, component-major.
    pub m: Array1<f64>,
    /// `(K * feat_dim) x rank`.
    pub t: Array2<f64>,
    /// Diagonal covariance supervector.
    pub sigma: Array1<f64>,
    pub n_components: usize,
    pub feat_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TvTraining {
    pub model: TotalVariabilityModel,
    /// Marginal log-likelihood of the statistics (up to a constant) before each iteration,
    /// plus one entry for the final model.
    pub auxiliary: Vec<f64>,
}

/// Posterior of `w` given one utterance.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Array1<f64>,
    /// `L^-1`.
    pub covariance: Array2<f64>,
    /// `log |L|`.
    pub log_det_precision: f64,
    /// `T' Sigma^-1 F`.
    pub linear: Array1<f64>,
}

impl TotalVariabilityModel {
    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn supervector_dim(&self) -> usize {
        self.t.nrows()
    }

    /// Fresh model around `ubm` with `T = diag(sqrt(Sigma)) Q`, `Q` a seeded random matrix with
    /// orthonormal columns.
    pub fn initial(ubm: &GmmUbm, rank: usize, seed: u64) -> Result<Self> {
        let (k, d) = (ubm.n_components(), ubm.feat_dim());
        let dim = k * d;
        if rank == 0 || rank > dim {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} for supervector dimension {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(dim, rank, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let sigma: Array1<f64> = ubm.variances.iter().cloned().collect();
        let mut t = from_na(&q);
        for (mut row, s) in t.rows_mut().into_iter().zip(sigma.iter()) {
            row *= s.sqrt();
        }
        Ok(Self {
            m: ubm.means.iter().cloned().collect(),
            t,
            sigma,
            n_components: k,
            feat_dim: d,
        })
    }

    fn check(&self, stats: &BaumWelchStats) -> Result<()> {
        if stats.n.len() != self.n_components || stats.f.ncols() != self.feat_dim {
            return Err(Error::DimensionMismatch(format!(
                "statistics for {}x{} vs model {}x{}",
                stats.n.len(),
                stats.f.ncols(),
                self.n_components,
                self.feat_dim
            )));
        }
        Ok(())
    }

    /// `T_k' Sigma_k^-1 T_k` for every component.
    fn component_precisions(&self) -> Vec<Array2<f64>> {
        let d = self.feat_dim;
        (0..self.n_components)
            .map(|k| {
                let tk = self.t.slice(ndarray::s![k * d..(k + 1) * d, ..]);
                let mut scaled = tk.to_owned();
                for (mut row, s) in scaled
                    .rows_mut()
                    .into_iter()
                    .zip(self.sigma.iter().skip(k * d))
                {
                    row /= *s;
                }
                tk.t().dot(&scaled)
            })
            .collect()
    }

    fn precision(&self, stats: &BaumWelchStats, precisions: &[Array2<f64>]) -> Array2<f64> {
        let mut l = Array2::<f64>::eye(self.rank());
        for (k, p) in precisions.iter().enumerate() {
            if stats.n[k] != 0.0 {
                l.scaled_add(stats.n[k], p);
            }
        }
        symmetrize(&mut l);
        l
    }

    fn posterior_with(
        &self,
        stats: &BaumWelchStats,
        precisions: &[Array2<f64>],
    ) -> Result<Posterior> {
        let l = self.precision(stats, precisions);
        let linear = self.t.t().dot(&(stats.f_supervector() / &self.sigma));
        let chol = to_na(&l)
            .cholesky()
            .ok_or_else(|| Error::Numeric("posterior precision not positive definite".into()))?;
        let log_det_precision = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let covariance = spd_inverse(&l)?;
        let mean = covariance.dot(&linear);
        Ok(Posterior {
            mean,
            covariance,
            log_det_precision,
            linear,
        })
    }

    pub fn posterior(&self, stats: &BaumWelchStats) -> Result<Posterior> {
        self.check(stats)?;
        self.posterior_with(stats, &self.component_precisions())
    }
}

/// `w = (I + T' Sigma^-1 N T)^-1 T' Sigma^-1 F`.
pub fn extract_ivector(tv: &TotalVariabilityModel, stats: &BaumWelchStats) -> Result<IVector> {
    tv.check(stats)?;
    let l = tv.precision(stats, &tv.component_precisions());
    let linear = tv.t.t().dot(&(stats.f_supervector() / &tv.sigma));
    let w = spd_solve(&l, &linear.insert_axis(Axis(1)))?;
    Ok(w.column(0).to_owned())
}

/// EM for `T` with fixed `m` and `Sigma`.
pub fn train_tv(
    stats: &[BaumWelchStats],
    ubm: &GmmUbm,
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<TvTraining> {
    if stats.len() < rank {
        return Err(Error::InvalidArgument(format!(
            "{} utterances cannot support rank {rank}",
            stats.len()
        )));
    }
    let mut model = TotalVariabilityModel::initial(ubm, rank, seed)?;
    for s in stats {
        model.check(s)?;
    }
    let (k, d) = (model.n_components, model.feat_dim);
    let mut auxiliary = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let precisions = model.component_precisions();
        let posteriors = stats
            .par_iter()
            .map(|s| model.posterior_with(s, &precisions))
            .collect::<Result<Vec<_>>>()?;
        auxiliary.push(objective(&posteriors));
        // accumulators in utterance order
        let mut a = vec![Array2::<f64>::zeros((rank, rank)); k];
        let mut c = Array2::<f64>::zeros((k * d, rank));
        for (s, p) in stats.iter().zip(&posteriors) {
            let mean = p.mean.view().insert_axis(Axis(1));
            let second = &p.covariance + &mean.dot(&mean.t());
            for (j, acc) in a.iter_mut().enumerate() {
                if s.n[j] != 0.0 {
                    acc.scaled_add(s.n[j], &second);
                }
            }
            let f = s.f_supervector().insert_axis(Axis(1));
            c += &f.dot(&mean.t());
        }
        for (j, mut acc) in a.into_iter().enumerate() {
            for i in 0..rank {
                acc[[i, i]] += TV_RIDGE;
            }
            let cj = c.slice(ndarray::s![j * d..(j + 1) * d, ..]);
            // T_j A_j = C_j  <=>  A_j T_j' = C_j'
            let tj = spd_solve(&acc, &cj.t().to_owned())?;
            model
                .t
                .slice_mut(ndarray::s![j * d..(j + 1) * d, ..])
                .assign(&tj.t());
        }
        if !model.t.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("total variability matrix diverged".into()));
        }
    }
    let precisions = model.component_precisions();
    let posteriors = stats
        .par_iter()
        .map(|s| model.posterior_with(s, &precisions))
        .collect::<Result<Vec<_>>>()?;
    auxiliary.push(objective(&posteriors));
    Ok(TvTraining { model, auxiliary })
}

/// `sum_u -1/2 log|L_u| + 1/2 b_u' L_u^-1 b_u`, the `T`-dependent part of the marginal
/// log-likelihood of the statistics.
fn objective(posteriors: &[Posterior]) -> f64 {
    posteriors
        .iter()
        .map(|p| -0.5 * p.log_det_precision + 0.5 * p.linear.dot(&p.mean))
        .sum()
}

/// Principal (largest) angle in degrees between the column spans of `a` and `b`.
pub fn subspace_angle_degrees(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let qa = to_na(a).qr().q();
    let qb = to_na(b).qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let smallest = s
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .clamp(-1.0, 1.0);
    smallest.acos().to_degrees()
}
