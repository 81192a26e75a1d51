//! Linear discriminant analysis on i-vectors and cosine scoring.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::linalg::to_na;
use super::IVector;
use crate::error::{Error, Result};

/// Shrinkage added to a singular within-class scatter, relative to its mean diagonal.
pub const LDA_SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaProjection {
    /// `rank x lda_dim`; columns are generalized eigenvectors, `S_w`-orthonormal.
    pub a: Array2<f64>,
    /// Descending.
    pub eigenvalues: Array1<f64>,
    /// Between-class scatter the projection was fitted to.
    pub s_b: Array2<f64>,
    /// Within-class scatter, including any shrinkage that was applied.
    pub s_w: Array2<f64>,
}

impl LdaProjection {
    pub fn input_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.a.ncols()
    }

    /// `||S_b A - S_w A diag(lambda)||_F / ||S_b A||_F`.
    pub fn residual(&self) -> f64 {
        let lhs = self.s_b.dot(&self.a);
        let rhs = self.s_w.dot(&self.a) * &self.eigenvalues;
        let num = (&lhs - &rhs).mapv(|v| v * v).sum().sqrt();
        let den = lhs.mapv(|v| v * v).sum().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    /// Fisher ratio `d' S_b d / d' S_w d` of a direction.
    pub fn fisher_ratio(&self, d: ArrayView1<f64>) -> f64 {
        d.dot(&self.s_b.dot(&d)) / d.dot(&self.s_w.dot(&d))
    }
}

/// Between-class (weighted by class size) and within-class scatter, both divided by the sample count.
pub fn scatter_matrices(ivectors: &[(IVector, usize)]) -> Result<(Array2<f64>, Array2<f64>)> {
    let dim = ivectors.first().ok_or(Error::EmptyInput)?.0.len();
    if ivectors.iter().any(|(w, _)| w.len() != dim) {
        return Err(Error::DimensionMismatch(
            "i-vectors of different dimensions".into(),
        ));
    }
    let mut classes: BTreeMap<usize, Vec<&IVector>> = BTreeMap::new();
    for (w, label) in ivectors {
        classes.entry(*label).or_default().push(w);
    }
    let n = ivectors.len() as f64;
    let mut global = Array1::<f64>::zeros(dim);
    for (w, _) in ivectors {
        global += w;
    }
    global /= n;
    let mut s_b = Array2::<f64>::zeros((dim, dim));
    let mut s_w = Array2::<f64>::zeros((dim, dim));
    for members in classes.values() {
        let mut mean = Array1::<f64>::zeros(dim);
        for w in members {
            mean += *w;
        }
        mean /= members.len() as f64;
        let diff = (&mean - &global).insert_axis(Axis(1));
        s_b.scaled_add(members.len() as f64 / n, &diff.dot(&diff.t()));
        for w in members {
            let e = (*w - &mean).insert_axis(Axis(1));
            s_w.scaled_add(1.0 / n, &e.dot(&e.t()));
        }
    }
    Ok((s_b, s_w))
}

/// Solves `S_b v = lambda S_w v` and keeps the top `lda_dim` directions.
pub fn train_lda(ivectors: &[(IVector, usize)], lda_dim: usize) -> Result<LdaProjection> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, label) in ivectors {
        *counts.entry(*label).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::InvalidArgument(
            "LDA needs at least two speakers with at least two i-vectors each".into(),
        ));
    }
    let (s_b, mut s_w) = scatter_matrices(ivectors)?;
    let dim = s_b.nrows();
    if lda_dim == 0 || lda_dim > dim.min(counts.len() - 1) {
        return Err(Error::InvalidArgument(format!(
            "lda_dim {lda_dim} exceeds min(rank {dim}, speakers - 1 = {})",
            counts.len() - 1
        )));
    }
    let eig_w = to_na(&s_w).symmetric_eigenvalues();
    let max_w = eig_w.iter().cloned().fold(0.0, f64::max);
    let min_w = eig_w.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_w <= 1e-12 * max_w || max_w == 0.0 {
        let scale = s_w.diag().sum().max(s_b.diag().sum()) / dim as f64;
        let eps = if scale > 0.0 {
            LDA_SHRINKAGE * scale
        } else {
            1e-12
        };
        for i in 0..dim {
            s_w[[i, i]] += eps;
        }
    }
    let chol = to_na(&s_w)
        .cholesky()
        .ok_or_else(|| Error::Numeric("within-class scatter not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    let m = &l_inv * to_na(&s_b) * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let l_inv_t = l_inv.transpose();
    let mut a = Array2::<f64>::zeros((dim, lda_dim));
    let mut eigenvalues = Array1::<f64>::zeros(lda_dim);
    for (col, &i) in order.iter().take(lda_dim).enumerate() {
        let mut v: Array1<f64> = (&l_inv_t * eig.eigenvectors.column(i))
            .iter()
            .cloned()
            .collect();
        // sign convention: largest-magnitude entry positive
        let pivot = v
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        a.column_mut(col).assign(&v);
        eigenvalues[col] = eig.eigenvalues[i];
    }
    Ok(LdaProjection {
        a,
        eigenvalues,
        s_b,
        s_w,
    })
}

/// `w* = A' w`.
pub fn project_lda(lda: &LdaProjection, w: &IVector) -> Result<IVector> {
    if w.len() != lda.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "i-vector of dimension {} for a projection from {}",
            w.len(),
            lda.input_dim()
        )));
    }
    Ok(lda.a.t().dot(w))
}

pub fn cosine_score(a: &IVector, b: &IVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(
            "vectors of different dimensions".into(),
        ));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker of the best-scoring model; exact ties go to the lowest speaker index.
pub fn identify(models: &[(usize, IVector)], probe: &IVector) -> Result<usize> {
    if models.is_empty() {
        return Err(Error::EmptyModels);
    }
    let mut best: Option<(usize, f64)> = None;
    for (speaker, model) in models {
        let s = cosine_score(model, probe)?;
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b < *speaker) => Some((b, bs)),
            _ => Some((*speaker, s)),
        };
    }
    Ok(best.expect("non-empty").0)
}

/// Per-speaker mean i-vectors, sorted by speaker.
pub fn speaker_models(ivectors: &[(IVector, usize)]) -> Vec<(usize, IVector)> {
    let mut groups: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (w, label) in ivectors {
        let e = groups
            .entry(*label)
            .or_insert_with(|| (Array1::zeros(w.len()), 0));
        e.0 += w;
        e.1 += 1;
    }
    groups
        .into_iter()
        .map(|(s, (sum, n))| (s, sum / n as f64))
        .collect()
}

/// Tab-separated dump: label, then the coordinates.
pub fn ivectors_to_tsv(ivectors: &[(IVector, usize)]) -> String {
    let mut out = String::new();
    for (w, label) in ivectors {
        out.push_str(&label.to_string());
        for v in w {
            out.push('\t');
            out.push_str(&format!("{v:e}"));
        }
        out.push('\n');
    }
    out
}
