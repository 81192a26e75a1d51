use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(
                "waveform contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn add(&self, other: &Waveform) -> Result<Self> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch(
                self.sample_rate,
                other.sample_rate,
            ));
        }
        let len = self.len().min(other.len());
        Ok(Self {
            samples: (0..len)
                .map(|i| self.samples[i] + other.samples[i])
                .collect(),
            sample_rate: self.sample_rate,
        })
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidArgument(format!(
                "{}: expected mono audio, found {} channels",
                path.as_ref().display(),
                spec.channels
            )));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::InvalidArgument(format!(
                "{}: expected 16-bit PCM",
                path.as_ref().display()
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes a mono 16-bit PCM WAV file. Samples outside [-1, 1) are clipped.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            let v = (s * 32768.0)
                .round()
                .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Rounds every sample to the 16-bit grid used by [`Waveform::write_wav`].
    pub fn quantized(&self) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| {
                    (s * 32768.0)
                        .round()
                        .clamp(i16::MIN as f64, i16::MAX as f64)
                        / 32768.0
                })
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Output of [`mix_at_snr`]: the mixture and the two scaled references it was built from.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixture: Waveform,
    pub scaled_a: Waveform,
    pub scaled_b: Waveform,
}

/// Mixes `a` and `b` so that `a` sits `snr_db` above the rescaled `b`.
///
/// Both inputs are first truncated to the shorter length; the SNR is realized on the
/// truncated signals.
pub fn mix_at_snr(a: &Waveform, b: &Waveform, snr_db: f64) -> Result<Mixture> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::SampleRateMismatch(a.sample_rate, b.sample_rate));
    }
    let len = a.len().min(b.len());
    let a = a.resized(len);
    let b = b.resized(len);
    let ea = a.energy();
    let eb = b.energy();
    if ea <= 0.0 || eb <= 0.0 {
        return Err(Error::ZeroEnergySource);
    }
    let gain = (ea / (eb * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_b = b.scaled(gain);
    let mixture = a.add(&scaled_b)?;
    Ok(Mixture {
        mixture,
        scaled_a: a,
        scaled_b,
    })
}
