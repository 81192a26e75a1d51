//! Permutation-free affinity objective `||V V^T - Y Y^T||_F^2` over retained bins.
//!
//! The N x N affinity matrices are never built. With one-hot targets the objective expands to
//! `||V^T V||^2 - 2 sum_c ||s_c||^2 + sum_c n_c^2`, where `s_c` is the sum of embeddings
//! labelled `c` and `n_c` the number of such bins.

use ndarray::{Array2, ArrayView2, Axis};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

/// Default exclusion threshold relative to the utterance's peak bin magnitude.
pub const DEFAULT_BIN_THRESHOLD_DB: f64 = -40.0;

/// Which time-frequency bins participate in the objective and in clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct BinMask {
    pub keep: Array2<bool>,
}

impl BinMask {
    /// Keeps bins whose magnitude is at least `threshold_db` relative to the peak magnitude.
    pub fn from_spectrogram(s: &Spectrogram, threshold_db: f64) -> Self {
        let mags = s.magnitudes();
        let peak = mags.iter().cloned().fold(0.0, f64::max);
        let floor = peak * 10f64.powf(threshold_db / 20.0);
        Self {
            keep: mags.mapv(|m| m >= floor),
        }
    }

    pub fn all(frames: usize, freq_bins: usize) -> Self {
        Self {
            keep: Array2::from_elem((frames, freq_bins), true),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.keep.len()
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// Row-major flat view, index `t * F + f`.
    pub fn flat(&self) -> Vec<bool> {
        self.keep.iter().cloned().collect()
    }
}

/// N x D embeddings with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub v: Array2<f64>,
}

impl EmbeddingMatrix {
    /// Normalizes every row of `u` to unit length. Returns the row norms alongside.
    pub fn normalize(u: &Array2<f64>) -> (Self, Vec<f64>) {
        let mut v = u.clone();
        let mut norms = Vec::with_capacity(u.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
            norms.push(n);
        }
        (Self { v }, norms)
    }

    pub fn n_rows(&self) -> usize {
        self.v.nrows()
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }
}

/// One-hot dominance targets. Excluded rows carry an all-zero target and no label.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityTarget {
    pub y: Array2<f64>,
    pub labels: Vec<Option<usize>>,
}

impl AffinityTarget {
    /// Builds targets from explicit labels (`None` = excluded).
    pub fn from_labels(labels: Vec<Option<usize>>, n_sources: usize) -> Result<Self> {
        let mut y = Array2::zeros((labels.len(), n_sources));
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = *l {
                if c >= n_sources {
                    return Err(Error::InvalidArgument(format!("label {c} >= {n_sources}")));
                }
                y[[i, c]] = 1.0;
            }
        }
        Ok(Self { y, labels })
    }

    pub fn n_sources(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.y.nrows()
    }

    /// Reorders the target columns: new column `j` is old column `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (j, &p) in perm.iter().enumerate() {
            inverse[p] = j;
        }
        let labels = self.labels.iter().map(|l| l.map(|c| inverse[c])).collect();
        Self::from_labels(labels, self.n_sources()).expect("valid permutation")
    }
}

/// Assigns each retained bin to the source with the largest magnitude; exact ties go to the
/// lowest source index.
pub fn build_targets(sources: &[Spectrogram], mask: &BinMask) -> Result<AffinityTarget> {
    if sources.len() < 2 {
        return Err(Error::InvalidArgument("need at least two sources".into()));
    }
    let dim = sources[0].bins().dim();
    if sources.iter().any(|s| s.bins().dim() != dim) || mask.keep.dim() != dim {
        return Err(Error::DimensionMismatch(
            "source spectrogram shapes differ".into(),
        ));
    }
    let mags: Vec<Array2<f64>> = sources.iter().map(|s| s.magnitudes()).collect();
    let labels = mask
        .keep
        .indexed_iter()
        .map(|((t, f), &keep)| {
            keep.then(|| {
                let mut best = 0;
                for c in 1..mags.len() {
                    if mags[c][[t, f]] > mags[best][[t, f]] {
                        best = c;
                    }
                }
                best
            })
        })
        .collect();
    AffinityTarget::from_labels(labels, sources.len())
}

fn check_rows(v: ArrayView2<f64>, y: &AffinityTarget, mask: &[bool]) -> Result<()> {
    if v.nrows() != y.n_rows() || mask.len() != v.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have {} rows, targets {}, mask {}",
            v.nrows(),
            y.n_rows(),
            mask.len()
        )));
    }
    Ok(())
}

/// Retained rows are those kept by the mask that also carry a label.
fn retained_rows(y: &AffinityTarget, mask: &[bool]) -> Vec<(usize, usize)> {
    mask.iter()
        .zip(&y.labels)
        .enumerate()
        .filter_map(|(i, (&k, l))| if k { l.map(|c| (i, c)) } else { None })
        .collect()
}

/// Sum of the values after sorting, so the result does not depend on their order.
fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Value of the affinity objective plus the quantities reused by its gradient.
#[derive(Debug, Clone)]
pub struct AffinityTerms {
    pub loss: f64,
    pub retained: usize,
    vtv: Array2<f64>,
    class_sums: Array2<f64>,
    rows: Vec<(usize, usize)>,
}

impl AffinityTerms {
    /// Loss divided by the squared number of retained bins.
    pub fn normalized(&self) -> f64 {
        if self.retained == 0 {
            0.0
        } else {
            self.loss / (self.retained as f64 * self.retained as f64)
        }
    }
}

pub fn affinity_terms(
    v: ArrayView2<f64>,
    y: &AffinityTarget,
    mask: &[bool],
) -> Result<AffinityTerms> {
    check_rows(v, y, mask)?;
    let d = v.ncols();
    let c = y.n_sources();
    let rows = retained_rows(y, mask);
    let idx: Vec<usize> = rows.iter().map(|(i, _)| *i).collect();
    let kept = v.select(Axis(0), &idx);
    let vtv = kept.t().dot(&kept);
    let mut class_sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0f64; c];
    for &(i, label) in &rows {
        let mut acc = class_sums.row_mut(label);
        acc += &v.row(i);
        counts[label] += 1.0;
    }
    let vv = vtv.iter().map(|x| x * x).sum::<f64>();
    let vy = order_free_sum(class_sums.rows().into_iter().map(|s| s.dot(&s)).collect());
    let yy = order_free_sum(counts.iter().map(|n| n * n).collect());
    Ok(AffinityTerms {
        loss: vv - 2.0 * vy + yy,
        retained: rows.len(),
        vtv,
        class_sums,
        rows,
    })
}

/// `||V V^T - Y Y^T||_F^2` over bins kept by `mask` (flat, row-major).
pub fn affinity_loss(v: &EmbeddingMatrix, y: &AffinityTarget, mask: &BinMask) -> Result<f64> {
    Ok(affinity_terms(v.v.view(), y, &mask.flat())?.loss)
}

/// Gradient w.r.t. the (unit-norm) embeddings: `4 (V V^T V - Y Y^T V)` on retained rows,
/// zero elsewhere.
pub fn embedding_grad(v: ArrayView2<f64>, terms: &AffinityTerms) -> Array2<f64> {
    let mut grad = Array2::zeros(v.dim());
    for &(i, label) in &terms.rows {
        let g = terms.vtv.dot(&v.row(i)) - &terms.class_sums.row(label);
        grad.row_mut(i).assign(&(g * 4.0));
    }
    grad
}

/// Pulls a gradient w.r.t. unit rows `v = u / |u|` back to the raw rows `u`.
pub fn normalize_backward(v: ArrayView2<f64>, norms: &[f64], grad_v: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_v.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let vi = v.row(i);
        let proj = vi.dot(&row);
        row.scaled_add(-proj, &vi);
        row /= norms[i];
    }
    out
}

/// Gradient of the objective w.r.t. pre-normalization embeddings `u`.
pub fn affinity_loss_grad(
    u: &Array2<f64>,
    y: &AffinityTarget,
    mask: &BinMask,
) -> Result<Array2<f64>> {
    let (v, norms) = EmbeddingMatrix::normalize(u);
    let terms = affinity_terms(v.v.view(), y, &mask.flat())?;
    let gv = embedding_grad(v.v.view(), &terms);
    Ok(normalize_backward(v.v.view(), &norms, &gv))
}
