use ndarray::{Array1, Array2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Spectrogram, Waveform};
use crate::error::{Error, Result};

/// Relative log-magnitude floor, as a fraction of the spectrogram's peak magnitude.
pub const LOG_FLOOR_RELATIVE: f64 = 1e-8;
/// Smallest standard deviation kept by [`NormalizationStats`].
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    LogMagnitude,
    Mfcc,
}

/// Per-frame real features, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Keeps only the frames whose flag is set.
    pub fn select_frames(&self, keep: &[bool]) -> FeatureMatrix {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(_, k)| **k)
            .map(|(i, _)| i)
            .collect();
        FeatureMatrix {
            rows: self.rows.select(Axis(0), &idx),
            kind: self.kind,
        }
    }
}

/// Per-dimension mean and standard deviation gathered over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl NormalizationStats {
    pub fn fit(features: &[FeatureMatrix]) -> Result<Self> {
        let first = features.first().ok_or(Error::EmptyInput)?;
        let dim = first.dim();
        let mut sum = Array1::<f64>::zeros(dim);
        let mut count = 0usize;
        for f in features {
            if f.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "feature dim {} vs {dim}",
                    f.dim()
                )));
            }
            sum += &f.rows.sum_axis(Axis(0));
            count += f.n_frames();
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        let mean = sum / count as f64;
        let mut sq = Array1::<f64>::zeros(dim);
        for f in features {
            for row in f.rows.rows() {
                let d = &row - &mean;
                sq += &(&d * &d);
            }
        }
        let std = (sq / count as f64).mapv(|v| v.sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, rows: &mut Array2<f64>) {
        for mut row in rows.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
    }
}

/// `20 log10(|X| + eps)` per bin, optionally standardized.
///
/// `eps` is [`LOG_FLOOR_RELATIVE`] times the peak magnitude (or times one for an all-zero input).
pub fn log_magnitude(s: &Spectrogram, stats: Option<&NormalizationStats>) -> Result<FeatureMatrix> {
    let mags = s.magnitudes();
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let eps = LOG_FLOOR_RELATIVE * if peak > 0.0 { peak } else { 1.0 };
    let mut rows = mags.mapv(|m| 20.0 * (m + eps).log10());
    if let Some(stats) = stats {
        if stats.mean.len() != rows.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "normalization stats for {} bins, spectrogram has {}",
                stats.mean.len(),
                rows.ncols()
            )));
        }
        stats.apply(&mut rows);
    }
    Ok(FeatureMatrix {
        rows,
        kind: FeatureKind::LogMagnitude,
    })
}

/// MFCC front-end settings. Frame sizes are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub frame_seconds: f64,
    pub hop_seconds: f64,
    pub n_filters: usize,
    pub low_hz: f64,
    /// Upper band edge; `None` means Nyquist.
    pub high_hz: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            frame_seconds: 0.025,
            hop_seconds: 0.010,
            n_filters: 23,
            low_hz: 0.0,
            high_hz: None,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `n_fft / 2 + 1` power bins, each normalized to unit sum.
pub fn mel_filterbank(
    n_filters: usize,
    n_fft: usize,
    sample_rate: u32,
    low_hz: f64,
    high_hz: f64,
) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_filters, n_bins));
    for m in 0..n_filters {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            bank[[m, k]] = w;
        }
        let sum: f64 = bank.row(m).sum();
        if sum > 0.0 {
            bank.row_mut(m).mapv_inplace(|w| w / sum);
        } else {
            // filter narrower than one bin
            let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
            bank[[m, k]] = 1.0;
        }
    }
    bank
}

/// Orthonormal DCT-II of `x`, first `n_out` coefficients.
pub fn dct_ii(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1).max(1) as f64).cos()
        })
        .collect()
}

/// Mel-frequency cepstral coefficients with the default front-end.
pub fn mfcc(w: &Waveform, n_coeffs: usize) -> Result<FeatureMatrix> {
    mfcc_with_config(w, n_coeffs, &MfccConfig::default())
}

pub fn mfcc_with_config(
    w: &Waveform,
    n_coeffs: usize,
    config: &MfccConfig,
) -> Result<FeatureMatrix> {
    if n_coeffs == 0 || n_coeffs > config.n_filters {
        return Err(Error::InvalidArgument(format!(
            "n_coeffs must be in 1..={}, got {n_coeffs}",
            config.n_filters
        )));
    }
    let sr = w.sample_rate();
    let frame_len = ((config.frame_seconds * sr as f64).round() as usize).max(2);
    let hop = ((config.hop_seconds * sr as f64).round() as usize).max(1);
    let n_fft = frame_len.next_power_of_two();
    let high = config.high_hz.unwrap_or(sr as f64 / 2.0);
    let bank = mel_filterbank(config.n_filters, n_fft, sr, config.low_hz, high);
    let window = hamming(frame_len);
    let frames = if w.len() < frame_len {
        0
    } else {
        (w.len() - frame_len) / hop + 1
    };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut rows = Array2::zeros((frames, n_coeffs));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut power = Array1::<f64>::zeros(n_fft / 2 + 1);
    for t in 0..frames {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for n in 0..frame_len {
            buf[n].re = w.samples()[t * hop + n] * window[n];
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let log_mel: Vec<f64> = bank.dot(&power).iter().map(|e| e.max(1e-12).ln()).collect();
        for (k, c) in dct_ii(&log_mel, n_coeffs).into_iter().enumerate() {
            rows[[t, k]] = c;
        }
    }
    Ok(FeatureMatrix {
        rows,
        kind: FeatureKind::Mfcc,
    })
}
