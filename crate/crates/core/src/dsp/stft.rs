//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! A `window_len`-point real DFT has `window_len / 2 + 1` bins. The spectrogram exposes the
//! first `window_len / 2` of them (DC included) as its frequency axis; the Nyquist bin is kept
//! as a side channel so that synthesis stays exact.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

const COLA_TOLERANCE: f64 = 1e-9;

/// Periodic square-root Hann window.
pub fn sqrt_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let h = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos();
            h.sqrt()
        })
        .collect()
}

/// Complex time-frequency representation of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: Array2<Complex64>,
    nyquist: Vec<Complex64>,
    window_len: usize,
    hop: usize,
    window: Vec<f64>,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    /// Assembles a spectrogram from raw parts. `bins` is `frames x window_len / 2`.
    pub fn from_parts(
        bins: Array2<Complex64>,
        nyquist: Vec<Complex64>,
        window: Vec<f64>,
        hop: usize,
        sample_rate: u32,
        signal_len: usize,
    ) -> Result<Self> {
        let window_len = window.len();
        check_framing(window_len, hop)?;
        if bins.ncols() != window_len / 2 || nyquist.len() != bins.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "spectrogram {}x{} with {} nyquist values for window {}",
                bins.nrows(),
                bins.ncols(),
                nyquist.len(),
                window_len
            )));
        }
        Ok(Self {
            bins,
            nyquist,
            window_len,
            hop,
            window,
            sample_rate,
            signal_len,
        })
    }

    pub fn bins(&self) -> &Array2<Complex64> {
        &self.bins
    }

    pub fn nyquist(&self) -> &[Complex64] {
        &self.nyquist
    }

    pub fn n_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn freq_bins(&self) -> usize {
        self.bins.ncols()
    }

    /// Number of time-frequency bins, `frames * freq_bins`.
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    pub fn shape_matches(&self, other: &Spectrogram) -> bool {
        self.bins.dim() == other.bins.dim()
    }

    /// Same framing metadata, new bin values.
    pub fn with_bins(&self, bins: Array2<Complex64>, nyquist: Vec<Complex64>) -> Self {
        assert_eq!(bins.dim(), self.bins.dim());
        assert_eq!(nyquist.len(), self.nyquist.len());
        Self {
            bins,
            nyquist,
            ..self.clone()
        }
    }

    /// Rebuilds the full `window_len`-point DFT of frame `t` via Hermitian symmetry.
    pub fn full_frame_spectrum(&self, t: usize) -> Vec<Complex64> {
        let n = self.window_len;
        let half = n / 2;
        let mut full = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..half {
            full[k] = self.bins[[t, k]];
        }
        full[half] = self.nyquist[t];
        for k in 1..half {
            full[n - k] = self.bins[[t, k]].conj();
        }
        full
    }
}

fn check_framing(window_len: usize, hop: usize) -> Result<()> {
    if window_len == 0 || hop == 0 {
        return Err(Error::InvalidFraming(
            "window and hop must be positive".into(),
        ));
    }
    if hop > window_len {
        return Err(Error::InvalidFraming(format!(
            "hop {hop} exceeds window length {window_len}"
        )));
    }
    if window_len % 2 != 0 {
        return Err(Error::InvalidFraming(format!(
            "window length {window_len} must be even"
        )));
    }
    Ok(())
}

/// Leading zero padding applied before framing, so every real sample is fully overlapped.
fn lead_padding(window_len: usize, hop: usize) -> usize {
    window_len - hop
}

fn frame_count(signal_len: usize, window_len: usize, hop: usize) -> usize {
    let lead = lead_padding(window_len, hop);
    let needed = lead + signal_len + lead;
    if needed <= window_len {
        1
    } else {
        (needed - window_len).div_ceil(hop) + 1
    }
}

/// STFT with the default square-root Hann analysis window.
pub fn stft(w: &Waveform, window_len: usize, hop: usize) -> Result<Spectrogram> {
    check_framing(window_len, hop)?;
    stft_with_window(w, &sqrt_hann(window_len), hop)
}

pub fn stft_with_window(w: &Waveform, window: &[f64], hop: usize) -> Result<Spectrogram> {
    let window_len = window.len();
    check_framing(window_len, hop)?;
    if w.is_empty() {
        return Err(Error::EmptyInput);
    }
    let lead = lead_padding(window_len, hop);
    let frames = frame_count(w.len(), window_len, hop);
    let padded_len = (frames - 1) * hop + window_len;
    let mut padded = vec![0.0; padded_len];
    padded[lead..lead + w.len()].copy_from_slice(w.samples());

    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let half = window_len / 2;
    let mut bins = Array2::zeros((frames, half));
    let mut nyquist = Vec::with_capacity(frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for t in 0..frames {
        let start = t * hop;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..half {
            bins[[t, k]] = buf[k];
        }
        nyquist.push(buf[half]);
    }
    Ok(Spectrogram {
        bins,
        nyquist,
        window_len,
        hop,
        window: window.to_vec(),
        sample_rate: w.sample_rate(),
        signal_len: w.len(),
    })
}

/// Constant value of the summed squared window across shifts, or an error if not constant.
pub fn cola_constant(window: &[f64], hop: usize) -> Result<f64> {
    check_framing(window.len(), hop)?;
    let sums: Vec<f64> = (0..hop)
        .map(|n| {
            window
                .iter()
                .skip(n)
                .step_by(hop)
                .map(|w| w * w)
                .sum::<f64>()
        })
        .collect();
    let mean = sums.iter().sum::<f64>() / hop as f64;
    let worst = sums.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max);
    if mean <= 0.0 || worst > COLA_TOLERANCE * mean {
        return Err(Error::NonInvertibleFraming(format!(
            "window of length {} with hop {hop} does not overlap-add to a constant",
            window.len()
        )));
    }
    Ok(mean)
}

/// Weighted overlap-add inverse of [`stft`], trimmed to the original signal length.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let window_len = s.window_len;
    let hop = s.hop;
    let norm = cola_constant(&s.window, hop)?;
    let frames = s.n_frames();
    let lead = lead_padding(window_len, hop);
    let padded_len = (frames - 1) * hop + window_len;
    let mut out = vec![0.0; padded_len];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(window_len);
    for t in 0..frames {
        let mut buf = s.full_frame_spectrum(t);
        ifft.process(&mut buf);
        let start = t * hop;
        for n in 0..window_len {
            out[start + n] += buf[n].re / window_len as f64 * s.window[n];
        }
    }
    let end = (lead + s.signal_len).min(padded_len);
    let mut samples: Vec<f64> = out[lead.min(end)..end].iter().map(|v| v / norm).collect();
    samples.resize(s.signal_len, 0.0);
    Waveform::new(samples, s.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            8000,
        )
        .unwrap()
    }

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| Complex64::from_polar(v, -2.0 * PI * (k * j) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn paper_framing_gives_256_bins() {
        let w = noise(8000, 1);
        // 64 ms / 16 ms at 8 kHz
        let s = stft(&w, 512, 128).unwrap();
        assert_eq!(s.freq_bins(), 256);
        assert_eq!(s.window_len(), 512);
        assert_eq!(s.hop(), 128);
    }

    #[test]
    fn framing_errors() {
        let w = noise(100, 1);
        assert!(matches!(stft(&w, 0, 1), Err(Error::InvalidFraming(_))));
        assert!(matches!(stft(&w, 64, 0), Err(Error::InvalidFraming(_))));
        assert!(matches!(stft(&w, 64, 65), Err(Error::InvalidFraming(_))));
        let empty = Waveform::new(vec![], 8000).unwrap();
        assert!(matches!(stft(&empty, 64, 16), Err(Error::EmptyInput)));
    }

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let s = stft(&Waveform::zeros(8000, 8000), 512, 128).unwrap();
        assert!(s.bins().iter().all(|c| c.norm() == 0.0));
        let back = istft(&s).unwrap();
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin_and_matches_direct_dft() {
        let w = Waveform::new(
            (0..4000)
                .map(|n| (2.0 * PI * 1000.0 * n as f64 / 8000.0).sin())
                .collect(),
            8000,
        )
        .unwrap();
        let s = stft(&w, 512, 128).unwrap();
        let mags = s.magnitudes();
        for t in 4..s.n_frames() - 4 {
            let row = mags.row(t);
            let peak = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(peak, 64);
        }
        // brute-force DFT of frame 5
        let t = 5;
        let lead = 512 - 128;
        let win = sqrt_hann(512);
        let frame: Vec<f64> = (0..512)
            .map(|n| {
                let idx = (t * 128 + n) as isize - lead as isize;
                let x = if idx >= 0 && (idx as usize) < w.len() {
                    w.samples()[idx as usize]
                } else {
                    0.0
                };
                x * win[n]
            })
            .collect();
        let direct = naive_dft(&frame);
        for k in 0..256 {
            assert!((direct[k] - s.bins()[[t, k]]).norm() < 1e-8);
        }
        assert!((direct[256] - s.nyquist()[t]).norm() < 1e-8);
    }

    #[test]
    fn round_trip_is_exact() {
        let w = noise(5000, 7);
        let s = stft(&w, 512, 128).unwrap();
        let r = istft(&s).unwrap();
        assert_eq!(r.len(), w.len());
        let err: f64 = w
            .samples()
            .iter()
            .zip(r.samples())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!((err / w.energy()).sqrt() < 1e-6);
    }

    #[test]
    fn short_signal_is_padded_to_one_frame() {
        let w = noise(50, 3);
        let s = stft(&w, 64, 16).unwrap();
        let r = istft(&s).unwrap();
        for (a, b) in w.samples().iter().zip(r.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_property() {
        let w = noise(3000, 9);
        let s = stft(&w, 256, 64).unwrap();
        let s2 = stft(&istft(&s).unwrap(), 256, 64).unwrap();
        for (a, b) in s.bins().iter().zip(s2.bins()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn single_frame_synthesis_matches_inverse_dft() {
        let len = 64;
        let win = sqrt_hann(len);
        let seg: Vec<f64> = (0..len)
            .map(|n| (2.0 * PI * 5.0 * n as f64 / len as f64).sin() * win[n])
            .collect();
        let full = naive_dft(&seg);
        let bins = Array2::from_shape_fn((1, len / 2), |(_, k)| full[k]);
        let spec =
            Spectrogram::from_parts(bins, vec![full[len / 2]], win.clone(), 16, 8000, 16).unwrap();
        let out = istft(&spec).unwrap();
        let norm = cola_constant(&win, 16).unwrap();
        // the single frame starts at padded index 0, real signal begins after the lead
        let lead = len - 16;
        for (i, &v) in out.samples().iter().enumerate() {
            let n = lead + i;
            let expected = seg[n] * win[n] / norm;
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn non_cola_window_is_rejected() {
        let win = vec![1.0; 64];
        let bins = Array2::zeros((1, 32));
        let spec = Spectrogram::from_parts(bins, vec![Complex64::new(0.0, 0.0)], win, 24, 8000, 10)
            .unwrap();
        assert!(matches!(istft(&spec), Err(Error::NonInvertibleFraming(_))));
    }

    #[test]
    fn parseval_per_frame() {
        let w = noise(2000, 11);
        let s = stft(&w, 256, 64).unwrap();
        let win = sqrt_hann(256);
        let lead = 256 - 64;
        for t in 0..s.n_frames() {
            let time_energy: f64 = (0..256)
                .map(|n| {
                    let idx = (t * 64 + n) as isize - lead as isize;
                    let x = if idx >= 0 && (idx as usize) < w.len() {
                        w.samples()[idx as usize]
                    } else {
                        0.0
                    };
                    (x * win[n]).powi(2)
                })
                .sum();
            let spec_energy: f64 = s
                .full_frame_spectrum(t)
                .iter()
                .map(|c| c.norm_sqr())
                .sum::<f64>()
                / 256.0;
            if time_energy > 0.0 {
                assert!((time_energy - spec_energy).abs() / time_energy < 1e-6);
            }
        }
    }

    #[test]
    fn linearity() {
        let a = noise(3000, 1);
        let b = noise(3000, 2);
        let (alpha, beta) = (0.7, -1.3);
        let combo = Waveform::new(
            a.samples()
                .iter()
                .zip(b.samples())
                .map(|(x, y)| alpha * x + beta * y)
                .collect(),
            8000,
        )
        .unwrap();
        let sa = stft(&a, 512, 128).unwrap();
        let sb = stft(&b, 512, 128).unwrap();
        let sc = stft(&combo, 512, 128).unwrap();
        let scale = sc.bins().iter().map(|c| c.norm()).fold(0.0, f64::max);
        for ((x, y), z) in sa.bins().iter().zip(sb.bins()).zip(sc.bins()) {
            assert!((x * alpha + y * beta - z).norm() <= 1e-9 * scale);
        }
    }
}
