//! Waveform and time-frequency front end.

mod features;
mod stft;
mod vad;
mod waveform;

pub use features::{
    dct_ii, log_magnitude, mel_filterbank, mfcc, mfcc_with_config, FeatureKind, FeatureMatrix,
    MfccConfig, NormalizationStats, LOG_FLOOR_RELATIVE, STD_FLOOR,
};
pub use stft::{cola_constant, istft, sqrt_hann, stft, stft_with_window, Spectrogram};
pub use vad::{energy_vad, vad_from_energies, FrameEnergy};
pub use waveform::{mix_at_snr, Mixture, Waveform};
