//! Synthetic multi-speaker corpus: formant-filtered pulse trains with per-speaker envelopes.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{mix_at_snr, Waveform};
use crate::error::{Error, Result};

/// Peak level of a synthesized utterance, leaving headroom so mixtures stay in 16-bit range.
const UTTERANCE_PEAK: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_seconds: f64,
    pub snr_range_db: (f64, f64),
    pub sample_rate: u32,
    /// Leading utterances of each speaker kept aside for speaker models.
    pub enrollment_per_speaker: usize,
    /// Next utterances of each speaker reserved for test mixtures.
    pub test_per_speaker: usize,
    pub train_mixtures: usize,
    pub validation_mixtures: usize,
    pub test_mixtures: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            utterances_per_speaker: 48,
            utterance_seconds: 2.5,
            snr_range_db: (0.0, 10.0),
            sample_rate: 8000,
            enrollment_per_speaker: 8,
            test_per_speaker: 8,
            train_mixtures: 200,
            validation_mixtures: 24,
            test_mixtures: 40,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_speakers < 2 {
            return bad("corpus needs at least two speakers");
        }
        if self.enrollment_per_speaker + self.test_per_speaker >= self.utterances_per_speaker {
            return bad("no utterances left for training after enrollment and test");
        }
        if self.test_per_speaker == 0 && self.test_mixtures > 0 {
            return bad("test mixtures need test utterances");
        }
        if !(self.utterance_seconds > 0.0) || self.sample_rate == 0 {
            return bad("utterance length and sample rate must be positive");
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("snr range must be finite and ordered");
        }
        Ok(())
    }

    fn train_range(&self) -> std::ops::Range<usize> {
        self.enrollment_per_speaker + self.test_per_speaker..self.utterances_per_speaker
    }

    fn test_range(&self) -> std::ops::Range<usize> {
        self.enrollment_per_speaker..self.enrollment_per_speaker + self.test_per_speaker
    }
}

/// Fixed vocal characteristics of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub f0_hz: f64,
    /// Formant sets (frequency Hz, bandwidth Hz, relative gain), one per vowel.
    pub vowels: Vec<Vec<(f64, f64, f64)>>,
    /// One-pole low-pass coefficient shaping the glottal source.
    pub tilt: f64,
    pub breathiness: f64,
}

/// Vowel formant targets (frequency Hz, bandwidth Hz) shared by every speaker of a corpus.
fn vowel_inventory(rng: &mut ChaCha8Rng) -> Vec<[(f64, f64); 4]> {
    (0..VOWELS)
        .map(|_| {
            [
                (
                    rng.random_range(300.0..850.0),
                    rng.random_range(60.0..110.0),
                ),
                (
                    rng.random_range(850.0..2300.0),
                    rng.random_range(80.0..140.0),
                ),
                (
                    rng.random_range(2300.0..2900.0),
                    rng.random_range(120.0..200.0),
                ),
                (
                    rng.random_range(3100.0..3500.0),
                    rng.random_range(150.0..250.0),
                ),
            ]
        })
        .collect()
}

const VOWELS: usize = 16;

impl Voice {
    /// A speaker realizes the shared inventory through its own vocal tract: a length factor,
    /// per-formant offsets, bandwidth scale and formant gains.
    fn random(
        index: usize,
        tract_slot: usize,
        n_speakers: usize,
        inventory: &[[(f64, f64); 4]],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // pitch strata spread speakers across the 90-260 Hz range
        let lo = 90.0f64.ln();
        let hi = 260.0f64.ln();
        let slot = (index as f64 + rng.random_range(0.2..0.8)) / n_speakers as f64;
        let f0_hz = (lo + (hi - lo) * slot).exp();
        // tract-length strata are assigned independently of the pitch strata
        let tract =
            0.85 + 0.33 * (tract_slot as f64 + rng.random_range(0.2..0.8)) / n_speakers as f64;
        let offsets: Vec<f64> = (0..4).map(|_| rng.random_range(-0.08..0.08)).collect();
        let bw_scale = rng.random_range(0.7..1.4);
        let gains = [
            1.0,
            rng.random_range(0.4..0.9),
            rng.random_range(0.15..0.5),
            rng.random_range(0.05..0.3),
        ];
        let vowels = inventory
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&offsets)
                    .zip(gains)
                    .map(|((&(f, bw), o), g)| {
                        ((f * tract * (1.0 + o)).min(3800.0), bw * bw_scale, g)
                    })
                    .collect()
            })
            .collect();
        Self {
            f0_hz,
            vowels,
            tilt: rng.random_range(0.6..0.92),
            breathiness: rng.random_range(0.02..0.12),
        }
    }

    /// One utterance of `len` samples.
    pub fn synthesize(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let fs = sample_rate as f64;
        let mut out = vec![0.0; len];
        let jitter = 1.0 + rng.random_range(-0.06..0.06);
        let mut pos = (rng.random_range(0.02..0.12) * fs) as usize;
        while pos < len {
            let syllable = (rng.random_range(0.12..0.35) * fs) as usize;
            let end = (pos + syllable).min(len);
            let vowel = &self.vowels[rng.random_range(0..self.vowels.len())];
            let start_f0 = self.f0_hz * jitter * (1.0 + rng.random_range(-0.08..0.08));
            let slope = rng.random_range(-0.15..0.15);
            let amp = rng.random_range(0.5..1.0);
            let seg = self.voiced_segment(end - pos, fs, vowel, start_f0, slope, rng);
            let n = seg.len();
            let ramp = (0.02 * fs) as usize;
            for (i, v) in seg.into_iter().enumerate() {
                let env = if i < ramp {
                    0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
                } else if i + ramp > n {
                    0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                out[pos + i] += amp * env * v;
            }
            pos = end + (rng.random_range(0.03..0.15) * fs) as usize;
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            out.iter_mut().for_each(|v| *v *= UTTERANCE_PEAK / peak);
        }
        out
    }

    fn voiced_segment(
        &self,
        len: usize,
        fs: f64,
        formants: &[(f64, f64, f64)],
        f0: f64,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let mut excitation = vec![0.0; len];
        let mut phase = rng.random_range(0.0..1.0);
        let mut lp = 0.0;
        for (i, e) in excitation.iter_mut().enumerate() {
            let f = f0 * (1.0 + slope * i as f64 / len.max(1) as f64);
            phase += f / fs;
            let mut pulse = 0.0;
            if phase >= 1.0 {
                phase -= 1.0;
                pulse = 1.0;
            }
            let noise: f64 = StandardNormal.sample(rng);
            lp = self.tilt * lp + (1.0 - self.tilt) * pulse;
            *e = lp + self.breathiness * 0.05 * noise;
        }
        // parallel bank of two-pole resonators
        let mut out = vec![0.0; len];
        for &(f, bw, gain) in formants {
            let r = (-PI * bw / fs).exp();
            let theta = 2.0 * PI * f / fs;
            let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
            let norm = (1.0 - r) * gain;
            let (mut y1, mut y2) = (0.0, 0.0);
            for (o, &x) in out.iter_mut().zip(&excitation) {
                let y = norm * x + a1 * y1 + a2 * y2;
                y2 = y1;
                y1 = y;
                *o += y;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: usize,
    pub index: usize,
    #[serde(skip)]
    pub wave: Option<Waveform>,
}

impl Utterance {
    pub fn id(&self) -> String {
        format!("spk{:02}_utt{:03}", self.speaker, self.index)
    }

    pub fn waveform(&self) -> &Waveform {
        self.wave.as_ref().expect("utterance audio loaded")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureItem {
    pub id: String,
    pub split: Split,
    pub speakers: Vec<usize>,
    /// Utterance index (within its speaker) of each source.
    pub utterances: Vec<usize>,
    pub snr_db: f64,
    #[serde(skip)]
    pub mixture: Option<Waveform>,
    /// Scaled sources as they appear in the mixture.
    #[serde(skip)]
    pub sources: Vec<Waveform>,
}

impl MixtureItem {
    pub fn mixture(&self) -> &Waveform {
        self.mixture.as_ref().expect("mixture audio loaded")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub voices: Vec<Voice>,
    pub utterances: Vec<Utterance>,
    pub mixtures: Vec<MixtureItem>,
}

fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ index.wrapping_add(1).wrapping_mul(0x1656_67B1_9E37_79F9)
}

/// Builds the whole corpus from `spec`. Every utterance and source is representable in 16-bit
/// PCM, so writing and re-reading the corpus is lossless.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut voice_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 1, 0));
    let inventory = vowel_inventory(&mut voice_rng);
    let mut tract_slots: Vec<usize> = (0..spec.n_speakers).collect();
    tract_slots.shuffle(&mut voice_rng);
    let voices: Vec<Voice> = (0..spec.n_speakers)
        .map(|s| {
            Voice::random(
                s,
                tract_slots[s],
                spec.n_speakers,
                &inventory,
                &mut voice_rng,
            )
        })
        .collect();
    let len = (spec.utterance_seconds * spec.sample_rate as f64).round() as usize;
    let utterances = (0..spec.n_speakers * spec.utterances_per_speaker)
        .into_par_iter()
        .map(|i| {
            let (speaker, index) = (
                i / spec.utterances_per_speaker,
                i % spec.utterances_per_speaker,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 2, i as u64));
            let samples = voices[speaker].synthesize(len, spec.sample_rate, &mut rng);
            let wave = Waveform::new(samples, spec.sample_rate)?.quantized();
            Ok(Utterance {
                speaker,
                index,
                wave: Some(wave),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mixtures = Vec::new();
    let mut mix_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 3, 0));
    for (split, count) in [
        (Split::Train, spec.train_mixtures),
        (Split::Validation, spec.validation_mixtures),
        (Split::Test, spec.test_mixtures),
    ] {
        let range = if split == Split::Test {
            spec.test_range()
        } else {
            spec.train_range()
        };
        for m in 0..count {
            let a = mix_rng.random_range(0..spec.n_speakers);
            let mut b = mix_rng.random_range(0..spec.n_speakers - 1);
            if b >= a {
                b += 1;
            }
            let ua = mix_rng.random_range(range.clone());
            let ub = mix_rng.random_range(range.clone());
            let (lo, hi) = spec.snr_range_db;
            let snr_db = if hi > lo {
                mix_rng.random_range(lo..hi)
            } else {
                lo
            };
            let wa = utterances[a * spec.utterances_per_speaker + ua].waveform();
            let wb = utterances[b * spec.utterances_per_speaker + ub].waveform();
            let mix = mix_at_snr(wa, wb, snr_db)?;
            let sa = mix.scaled_a.quantized();
            let sb = mix.scaled_b.quantized();
            // the sum of two 16-bit grid values stays on the grid
            let mixture = sa.add(&sb)?;
            mixtures.push(MixtureItem {
                id: format!("{}_{m:04}", split.name()),
                split,
                speakers: vec![a, b],
                utterances: vec![ua, ub],
                snr_db,
                mixture: Some(mixture),
                sources: vec![sa, sb],
            });
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        voices,
        utterances,
        mixtures,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MixtureItem> {
        self.mixtures.iter().filter(move |m| m.split == split)
    }

    pub fn utterance(&self, speaker: usize, index: usize) -> &Utterance {
        &self.utterances[speaker * self.spec.utterances_per_speaker + index]
    }

    /// Utterances used to train the speaker models.
    pub fn development(&self) -> impl Iterator<Item = &Utterance> {
        let range = self.spec.train_range();
        self.utterances
            .iter()
            .filter(move |u| range.contains(&u.index))
    }

    pub fn enrollment(&self) -> impl Iterator<Item = &Utterance> {
        let n = self.spec.enrollment_per_speaker;
        self.utterances.iter().filter(move |u| u.index < n)
    }

    /// Clean utterances reserved for testing.
    pub fn test_utterances(&self) -> impl Iterator<Item = &Utterance> {
        let range = self.spec.test_range();
        self.utterances
            .iter()
            .filter(move |u| range.contains(&u.index))
    }

    /// Writes `manifest.json`, `utterances/*.wav` and `mixtures/<split>/<id>/{mix,s0,s1}.wav`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("utterances"))?;
        for u in &self.utterances {
            u.waveform()
                .write_wav(dir.join("utterances").join(format!("{}.wav", u.id())))?;
        }
        for m in &self.mixtures {
            let d = dir.join("mixtures").join(m.split.name()).join(&m.id);
            std::fs::create_dir_all(&d)?;
            m.mixture().write_wav(d.join("mix.wav"))?;
            for (c, s) in m.sources.iter().enumerate() {
                s.write_wav(d.join(format!("s{c}.wav")))?;
            }
        }
        let mut manifest = serde_json::to_string_pretty(self)?;
        manifest.push('\n');
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.json");
        if !manifest.exists() {
            return Err(Error::MissingDependency(format!(
                "corpus manifest {}",
                manifest.display()
            )));
        }
        let mut corpus: Corpus = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        for u in corpus.utterances.iter_mut() {
            u.wave = Some(Waveform::read_wav(
                dir.join("utterances").join(format!("{}.wav", u.id())),
            )?);
        }
        for m in corpus.mixtures.iter_mut() {
            let d = dir.join("mixtures").join(m.split.name()).join(&m.id);
            m.mixture = Some(Waveform::read_wav(d.join("mix.wav"))?);
            m.sources = (0..m.speakers.len())
                .map(|c| Waveform::read_wav(d.join(format!("s{c}.wav"))))
                .collect::<Result<_>>()?;
        }
        Ok(corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusSpec {
        CorpusSpec {
            n_speakers: 2,
            utterances_per_speaker: 10,
            utterance_seconds: 0.5,
            enrollment_per_speaker: 2,
            test_per_speaker: 2,
            train_mixtures: 3,
            validation_mixtures: 1,
            test_mixtures: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_corpus(&tiny()).unwrap();
        let b = generate_corpus(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.utterances.len(), 20);
        assert_eq!(a.mixtures.len(), 6);
        assert!(a.mixtures.iter().all(|m| m.speakers[0] != m.speakers[1]));
    }

    #[test]
    fn zero_db_range_gives_zero_db_mixtures() {
        let spec = CorpusSpec {
            snr_range_db: (0.0, 0.0),
            ..tiny()
        };
        let c = generate_corpus(&spec).unwrap();
        for m in &c.mixtures {
            assert_eq!(m.snr_db, 0.0);
            let realized = 10.0 * (m.sources[0].energy() / m.sources[1].energy()).log10();
            // only 16-bit rounding separates the realized ratio from 0 dB
            assert!(realized.abs() < 1e-3, "{realized}");
            let sum = m.sources[0].add(&m.sources[1]).unwrap();
            assert_eq!(&sum, m.mixture());
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let c = generate_corpus(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn splits_use_disjoint_utterances() {
        let c = generate_corpus(&tiny()).unwrap();
        let test: Vec<usize> = c
            .split(Split::Test)
            .flat_map(|m| m.utterances.clone())
            .collect();
        let train: Vec<usize> = c
            .split(Split::Train)
            .flat_map(|m| m.utterances.clone())
            .collect();
        assert!(test.iter().all(|u| (2..4).contains(u)));
        assert!(train.iter().all(|u| (4..10).contains(u)));
        assert_eq!(c.development().count(), 12);
        assert_eq!(c.enrollment().count(), 4);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_corpus(&CorpusSpec {
            n_speakers: 1,
            ..tiny()
        })
        .is_err());
        assert!(generate_corpus(&CorpusSpec {
            test_per_speaker: 8,
            ..tiny()
        })
        .is_err());
        assert!(generate_corpus(&CorpusSpec {
            snr_range_db: (5.0, 0.0),
            ..tiny()
        })
        .is_err());
    }
}
