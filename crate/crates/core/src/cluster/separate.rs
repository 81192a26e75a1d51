use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{
    apply_mask, kmeans_cosine, masks_from_assignment, masks_nearest_centroid, BinaryMaskSet,
};
use super::{ClusterAssignment, ExcludedBins};
use crate::dsp::{istft, log_magnitude, stft, NormalizationStats, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::net::{BinMask, EmbeddingMatrix, NetworkParameters, DEFAULT_BIN_THRESHOLD_DB};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationConfig {
    pub window_len: usize,
    pub hop: usize,
    /// Bins below `peak + bin_threshold_db` are left out of clustering.
    pub bin_threshold_db: f64,
    pub kmeans_restarts: usize,
    pub excluded: ExcludedBins,
    pub seed: u64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 128,
            bin_threshold_db: DEFAULT_BIN_THRESHOLD_DB,
            kmeans_restarts: 10,
            excluded: ExcludedBins::Silence,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Separation {
    pub estimates: Vec<Waveform>,
    pub masks: BinaryMaskSet,
    pub assignment: ClusterAssignment,
    pub bin_mask: BinMask,
}

/// Masks `spec` with each binary mask and resynthesizes.
pub fn reconstruct(spec: &Spectrogram, masks: &BinaryMaskSet) -> Result<Vec<Waveform>> {
    masks
        .masks
        .iter()
        .map(|m| istft(&apply_mask(spec, m)?))
        .collect()
}

/// Clusters given embeddings of `spec` into `c` sources and reconstructs them.
pub fn separate_embeddings(
    spec: &Spectrogram,
    embeddings: &EmbeddingMatrix,
    c: usize,
    config: &SeparationConfig,
) -> Result<Separation> {
    if embeddings.n_rows() != spec.n_bins() {
        return Err(Error::DimensionMismatch(format!(
            "{} embeddings for {} bins",
            embeddings.n_rows(),
            spec.n_bins()
        )));
    }
    let bin_mask = BinMask::from_spectrogram(spec, config.bin_threshold_db);
    let rows: Vec<usize> = bin_mask
        .flat()
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect();
    let points: Array2<f64> = embeddings.v.select(Axis(0), &rows);
    let assignment = kmeans_cosine(points.view(), c, config.kmeans_restarts, config.seed)?;
    let masks = match config.excluded {
        ExcludedBins::Silence => masks_from_assignment(&assignment, &bin_mask)?,
        ExcludedBins::NearestCentroid => {
            masks_nearest_centroid(&assignment, &bin_mask, embeddings)?
        }
    };
    let estimates = reconstruct(spec, &masks)?;
    Ok(Separation {
        estimates,
        masks,
        assignment,
        bin_mask,
    })
}

/// Full chain: STFT, features, network embeddings, clustering, masking, resynthesis.
pub fn separate(
    params: &NetworkParameters,
    stats: Option<&NormalizationStats>,
    mixture: &Waveform,
    ivectors: Option<&Array2<f64>>,
    c: usize,
    config: &SeparationConfig,
) -> Result<Separation> {
    let spec = stft(mixture, config.window_len, config.hop)?;
    let features = log_magnitude(&spec, stats)?;
    let embeddings = params.forward(features.rows.view(), ivectors)?;
    separate_embeddings(&spec, &embeddings, c, config)
}
