//! Experiment configuration with paper-scale and desk-scale presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusSpec;
use crate::cluster::{ExcludedBins, SeparationConfig};
use crate::error::{Error, Result};
use crate::net::{CellKind, NetworkShape, TrainerConfig, DEFAULT_BIN_THRESHOLD_DB};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub bin_threshold_db: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            window_len: 512,
            hop: 128,
            bin_threshold_db: DEFAULT_BIN_THRESHOLD_DB,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub cell: CellKind,
    pub hidden: usize,
    pub layers: usize,
    pub embedding_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Gru,
            hidden: 32,
            layers: 1,
            embedding_dim: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerConfig {
    pub mfcc_coeffs: usize,
    pub vad_threshold_db: f64,
    pub ubm_components: usize,
    pub ubm_iterations: usize,
    pub tv_rank: usize,
    pub tv_iterations: usize,
    pub use_lda: bool,
    pub lda_dim: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self {
            mfcc_coeffs: 13,
            vad_threshold_db: -40.0,
            ubm_components: 16,
            ubm_iterations: 10,
            tv_rank: 8,
            tv_iterations: 10,
            use_lda: false,
            lda_dim: 3,
        }
    }
}

impl SpeakerConfig {
    /// Width of one speaker's vector at the network input.
    pub fn ivec_dim(&self) -> usize {
        if self.use_lda {
            self.lda_dim
        } else {
            self.tv_rank
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Oracle,
    Realistic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Oracle => "oracle",
            Mode::Realistic => "realistic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Which level-1+ variants to run.
    pub modes: (bool, bool),
    /// Highest adapted level; 0 runs the baseline only.
    pub levels: usize,
    pub n_sources: usize,
    pub kmeans_restarts: usize,
    pub excluded_bins: ExcludedBins,
    /// Initialize realistic level-1 networks from the oracle ones (otherwise from level 0).
    pub realistic_from_oracle: bool,
    /// Learning rate for levels 1 and up; unset means `trainer.initial_lr`.
    pub adapted_initial_lr: Option<f64>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            modes: (true, true),
            levels: 1,
            n_sources: 2,
            kmeans_restarts: 10,
            excluded_bins: ExcludedBins::Silence,
            realistic_from_oracle: true,
            adapted_initial_lr: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn enabled_modes(&self) -> Vec<Mode> {
        let mut m = Vec::new();
        if self.modes.0 {
            m.push(Mode::Oracle);
        }
        if self.modes.1 {
            m.push(Mode::Realistic);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub dsp: DspConfig,
    pub net: NetConfig,
    pub trainer: TrainerConfig,
    pub speaker: SpeakerConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Settings sized for a single desktop: a few minutes of synthetic audio and a small GRU.
    pub fn desk() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            dsp: DspConfig::default(),
            net: NetConfig::default(),
            trainer: TrainerConfig {
                initial_lr: 3e-3,
                batch_size: 8,
                restarts: 1,
                max_epochs: 12,
                ..TrainerConfig::default()
            },
            speaker: SpeakerConfig::default(),
            pipeline: PipelineConfig {
                adapted_initial_lr: Some(1e-3),
                ..PipelineConfig::default()
            },
        }
    }

    /// The published configuration (corpus sizes are those of the published mixture lists).
    pub fn paper() -> Self {
        Self {
            corpus: CorpusSpec {
                n_speakers: 101,
                utterances_per_speaker: 120,
                utterance_seconds: 5.5,
                train_mixtures: 20000,
                validation_mixtures: 1500,
                test_mixtures: 3000,
                ..CorpusSpec::default()
            },
            dsp: DspConfig::default(),
            net: NetConfig {
                cell: CellKind::Lstm,
                hidden: 600,
                layers: 2,
                embedding_dim: 20,
            },
            trainer: TrainerConfig::default(),
            speaker: SpeakerConfig {
                ubm_components: 256,
                tv_rank: 400,
                tv_iterations: 10,
                ubm_iterations: 10,
                use_lda: true,
                lda_dim: 10,
                ..SpeakerConfig::default()
            },
            pipeline: PipelineConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.trainer.validate()?;
        if self.dsp.sample_rate != self.corpus.sample_rate {
            return Err(Error::Config(
                "dsp.sample_rate must equal corpus.sample_rate".into(),
            ));
        }
        if self.dsp.window_len % 2 != 0 || self.dsp.hop == 0 || self.dsp.hop > self.dsp.window_len {
            return Err(Error::Config(
                "dsp.window_len must be even and dsp.hop in 1..=window_len".into(),
            ));
        }
        if self.net.hidden == 0 || self.net.layers == 0 || self.net.embedding_dim == 0 {
            return Err(Error::Config("net sizes must be positive".into()));
        }
        if self.speaker.use_lda && self.speaker.lda_dim >= self.corpus.n_speakers {
            return Err(Error::Config(
                "speaker.lda_dim must be below the speaker count".into(),
            ));
        }
        if self.speaker.use_lda && self.speaker.lda_dim > self.speaker.tv_rank {
            return Err(Error::Config(
                "speaker.lda_dim cannot exceed speaker.tv_rank".into(),
            ));
        }
        if self
            .pipeline
            .adapted_initial_lr
            .is_some_and(|lr| !(lr > 0.0))
        {
            return Err(Error::Config(
                "pipeline.adapted_initial_lr must be positive".into(),
            ));
        }
        if self.pipeline.n_sources != 2 {
            return Err(Error::Config(
                "the corpus builds two-source mixtures; pipeline.n_sources must be 2".into(),
            ));
        }
        Ok(())
    }

    /// Network shape at `level`; level 0 has no speaker block.
    pub fn network_shape(&self, level: usize) -> NetworkShape {
        NetworkShape {
            cell: self.net.cell,
            freq_bins: self.dsp.window_len / 2,
            ivector_width: if level == 0 {
                0
            } else {
                self.pipeline.n_sources * self.speaker.ivec_dim()
            },
            hidden: self.net.hidden,
            layers: self.net.layers,
            embedding_dim: self.net.embedding_dim,
        }
    }

    pub fn separation(&self) -> SeparationConfig {
        SeparationConfig {
            window_len: self.dsp.window_len,
            hop: self.dsp.hop,
            bin_threshold_db: self.dsp.bin_threshold_db,
            kmeans_restarts: self.pipeline.kmeans_restarts,
            excluded: self.pipeline.excluded_bins,
            seed: self.pipeline.seed,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
