use ndarray::Array2;
use num_complex::Complex64;

use super::ClusterAssignment;
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::net::{BinMask, EmbeddingMatrix};

/// One binary mask per source, each `T x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMaskSet {
    pub masks: Vec<Array2<bool>>,
}

impl BinaryMaskSet {
    pub fn n_sources(&self) -> usize {
        self.masks.len()
    }

    /// Number of masks covering each bin.
    pub fn coverage(&self) -> Array2<usize> {
        let dim = self.masks[0].dim();
        let mut cover = Array2::zeros(dim);
        for m in &self.masks {
            cover.zip_mut_with(m, |c, &b| *c += b as usize);
        }
        cover
    }

    /// Masks in a new order: output `j` is input `order[j]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            masks: order.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

/// How bins excluded from clustering are treated when masks are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcludedBins {
    /// No mask claims them.
    #[default]
    Silence,
    /// They go to the nearest centroid.
    NearestCentroid,
}

/// Scatters cluster labels of the retained bins back onto the `T x F` grid.
pub fn masks_from_assignment(a: &ClusterAssignment, mask: &BinMask) -> Result<BinaryMaskSet> {
    let retained = mask.retained();
    if a.labels.len() != retained {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {retained} retained bins",
            a.labels.len()
        )));
    }
    let k = a.centroids.nrows();
    let mut masks = vec![Array2::from_elem(mask.keep.dim(), false); k];
    let mut labels = a.labels.iter();
    for ((t, f), &keep) in mask.keep.indexed_iter() {
        if keep {
            let c = *labels.next().expect("count checked");
            masks[c][[t, f]] = true;
        }
    }
    Ok(BinaryMaskSet { masks })
}

/// Like [`masks_from_assignment`], but excluded bins join their nearest centroid.
pub fn masks_nearest_centroid(
    a: &ClusterAssignment,
    mask: &BinMask,
    embeddings: &EmbeddingMatrix,
) -> Result<BinaryMaskSet> {
    let mut set = masks_from_assignment(a, mask)?;
    if embeddings.n_rows() != mask.n_bins() {
        return Err(Error::DimensionMismatch(
            "embedding rows vs mask bins".into(),
        ));
    }
    let freq = mask.keep.ncols();
    for ((t, f), &keep) in mask.keep.indexed_iter() {
        if !keep {
            let v = embeddings.v.row(t * freq + f);
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, centroid) in a.centroids.rows().into_iter().enumerate() {
                let s = centroid.dot(&v);
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            set.masks[best][[t, f]] = true;
        }
    }
    Ok(set)
}

/// Elementwise product of a spectrogram with a {0,1} mask. The Nyquist side channel follows the
/// mask of the highest exposed bin.
pub fn apply_mask(x: &Spectrogram, bm: &Array2<bool>) -> Result<Spectrogram> {
    if bm.dim() != x.bins().dim() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs spectrogram {:?}",
            bm.dim(),
            x.bins().dim()
        )));
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut bins = x.bins().clone();
    bins.zip_mut_with(bm, |b, &m| {
        if !m {
            *b = zero;
        }
    });
    let last = x.freq_bins() - 1;
    let nyquist = x
        .nyquist()
        .iter()
        .enumerate()
        .map(|(t, &v)| if bm[[t, last]] { v } else { zero })
        .collect();
    Ok(x.with_bins(bins, nyquist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, Waveform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assignment(labels: Vec<usize>, k: usize) -> ClusterAssignment {
        ClusterAssignment {
            labels,
            centroids: Array2::eye(k),
            total_cost: 0.0,
            cost_history: vec![],
            restart: 0,
        }
    }

    fn spec() -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Waveform::new(
            (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect(),
            8000,
        )
        .unwrap();
        stft(&w, 64, 16).unwrap()
    }

    #[test]
    fn all_label_zero() {
        let mask = BinMask::all(3, 4);
        let set = masks_from_assignment(&assignment(vec![0; 12], 2), &mask).unwrap();
        assert!(set.masks[0].iter().all(|&b| b));
        assert!(set.masks[1].iter().all(|&b| !b));
    }

    #[test]
    fn checkerboard_is_complementary() {
        let mask = BinMask::all(4, 4);
        let labels = (0..16).map(|i| ((i / 4) + (i % 4)) % 2).collect();
        let set = masks_from_assignment(&assignment(labels, 2), &mask).unwrap();
        for (a, b) in set.masks[0].iter().zip(set.masks[1].iter()) {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn random_assignment_partitions_retained_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mask = BinMask::all(6, 5);
        mask.keep.mapv_inplace(|_| rng.random_bool(0.7));
        let labels = (0..mask.retained())
            .map(|_| rng.random_range(0..3))
            .collect();
        let set = masks_from_assignment(&assignment(labels, 3), &mask).unwrap();
        let cover = set.coverage();
        for (c, &k) in cover.iter().zip(mask.keep.iter()) {
            assert_eq!(*c, k as usize);
        }
        assert!(masks_from_assignment(&assignment(vec![0; 3], 3), &mask).is_err());
    }

    #[test]
    fn nearest_policy_covers_everything() {
        let mut mask = BinMask::all(2, 2);
        mask.keep[[0, 0]] = false;
        let emb = EmbeddingMatrix {
            v: ndarray::array![[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        };
        let set = masks_nearest_centroid(&assignment(vec![0, 0, 1], 2), &mask, &emb).unwrap();
        assert!(set.masks[1][[0, 0]]);
        assert!(set.coverage().iter().all(|&c| c == 1));
    }

    #[test]
    fn apply_mask_identity_zero_and_idempotence() {
        let s = spec();
        let ones = Array2::from_elem(s.bins().dim(), true);
        assert_eq!(apply_mask(&s, &ones).unwrap(), s);
        let zeros = Array2::from_elem(s.bins().dim(), false);
        let z = apply_mask(&s, &zeros).unwrap();
        assert!(z.bins().iter().all(|c| c.norm() == 0.0));
        assert!(z.nyquist().iter().all(|c| c.norm() == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bm = Array2::from_shape_fn(s.bins().dim(), |_| rng.random_bool(0.5));
        let once = apply_mask(&s, &bm).unwrap();
        assert_eq!(apply_mask(&once, &bm).unwrap(), once);
        assert!(apply_mask(&s, &Array2::from_elem((1, 1), true)).is_err());
    }
}
