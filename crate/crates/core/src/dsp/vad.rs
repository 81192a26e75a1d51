use super::{FeatureKind, FeatureMatrix, Spectrogram};

/// Per-frame energy in dB, for anything that can be thresholded by [`energy_vad`].
pub trait FrameEnergy {
    fn frame_energy_db(&self) -> Vec<f64>;
}

fn to_db(power: f64) -> f64 {
    10.0 * power.max(1e-300).log10()
}

impl FrameEnergy for Spectrogram {
    fn frame_energy_db(&self) -> Vec<f64> {
        self.bins()
            .rows()
            .into_iter()
            .map(|row| to_db(row.iter().map(|c| c.norm_sqr()).sum()))
            .collect()
    }
}

impl FrameEnergy for FeatureMatrix {
    fn frame_energy_db(&self) -> Vec<f64> {
        match self.kind {
            FeatureKind::LogMagnitude => self
                .rows
                .rows()
                .into_iter()
                .map(|row| to_db(row.iter().map(|db| 10f64.powf(db / 10.0)).sum()))
                .collect(),
            // c0 of the orthonormal DCT is sqrt(M) times the mean natural-log mel energy;
            // the sqrt(M) factor is a per-matrix constant and drops out of relative thresholds.
            FeatureKind::Mfcc => self
                .rows
                .column(0)
                .iter()
                .map(|c0| 10.0 / std::f64::consts::LN_10 * c0)
                .collect(),
        }
    }
}

/// Marks a frame active iff its energy is within `threshold_db` (negative) of the loudest frame.
pub fn energy_vad<E: FrameEnergy + ?Sized>(input: &E, threshold_db: f64) -> Vec<bool> {
    vad_from_energies(&input.frame_energy_db(), threshold_db)
}

pub fn vad_from_energies(energies_db: &[f64], threshold_db: f64) -> Vec<bool> {
    let max = energies_db
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    energies_db
        .iter()
        .map(|&e| e >= max + threshold_db)
        .collect()
}
