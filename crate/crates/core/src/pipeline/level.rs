//! One level of the iterative architecture: train, separate every mixture, extract speaker
//! vectors from the estimates and score the test set.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    order_ivectors, Corpus, DspConfig, ExperimentConfig, MixtureItem, Mode, SpeakerModels, Split,
};
use crate::cluster::separate;
use crate::container::network_container;
use crate::dsp::{log_magnitude, stft, FeatureMatrix, NormalizationStats, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::eval::{sdr_improvement, speaker_id_eval, IdReport, SdrReport};
use crate::net::{
    build_targets, train, BinMask, Init, NetworkParameters, TrainerConfig, TrainingExample,
    TrainingLog,
};
use crate::speaker::IVector;

/// Normalized training and validation examples; speaker blocks are filled in per level.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: NormalizationStats,
    pub train: Vec<TrainingExample>,
    pub validation: Vec<TrainingExample>,
    /// Index into the corpus mixtures of every training example.
    pub train_index: Vec<usize>,
    pub validation_index: Vec<usize>,
}

fn raw_example(m: &MixtureItem, dsp: &DspConfig) -> Result<(FeatureMatrix, TrainingExample)> {
    let spec = stft(m.mixture(), dsp.window_len, dsp.hop)?;
    let raw = log_magnitude(&spec, None)?;
    let sources = m
        .sources
        .iter()
        .map(|s| stft(s, dsp.window_len, dsp.hop))
        .collect::<Result<Vec<Spectrogram>>>()?;
    let mask = BinMask::from_spectrogram(&spec, dsp.bin_threshold_db);
    let targets = build_targets(&sources, &mask)?;
    let ex = TrainingExample {
        features: Array2::zeros((0, 0)),
        ivectors: None,
        targets,
        keep: mask.flat(),
    };
    Ok((raw, ex))
}

/// Features, targets and retained-bin flags for the training and validation mixtures, with
/// normalization statistics fitted on the training mixtures.
pub fn prepare_examples(corpus: &Corpus, dsp: &DspConfig) -> Result<PreparedData> {
    let index = |split: Split| -> Vec<usize> {
        corpus
            .mixtures
            .iter()
            .enumerate()
            .filter(|(_, m)| m.split == split)
            .map(|(i, _)| i)
            .collect()
    };
    let (train_index, validation_index) = (index(Split::Train), index(Split::Validation));
    let build = |idx: &[usize]| -> Result<Vec<(FeatureMatrix, TrainingExample)>> {
        idx.par_iter()
            .map(|&i| raw_example(&corpus.mixtures[i], dsp))
            .collect()
    };
    let train_raw = build(&train_index)?;
    let validation_raw = build(&validation_index)?;
    let feats: Vec<FeatureMatrix> = train_raw.iter().map(|(f, _)| f.clone()).collect();
    let stats = NormalizationStats::fit(&feats)?;
    drop(feats);
    let finish = |raw: Vec<(FeatureMatrix, TrainingExample)>| -> Vec<TrainingExample> {
        raw.into_iter()
            .map(|(mut f, mut ex)| {
                stats.apply(&mut f.rows);
                ex.features = f.rows;
                ex
            })
            .collect()
    };
    Ok(PreparedData {
        train: finish(train_raw),
        validation: finish(validation_raw),
        stats,
        train_index,
        validation_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub mean_sdr_improvement: Option<f64>,
    pub mean_mixture_sdr: Option<f64>,
    /// Identification accuracy of i-vectors extracted from the test estimates.
    pub identification_accuracy: Option<f64>,
}

/// Everything one level produces.
#[derive(Debug, Clone)]
pub struct LevelArtifacts {
    pub level: usize,
    /// `None` for the level-0 baseline.
    pub mode: Option<Mode>,
    pub params: NetworkParameters,
    pub log: TrainingLog,
    pub best_validation_loss: f64,
    /// Speaker block fed to the network, per corpus mixture; empty at level 0.
    pub inputs: Vec<Array2<f64>>,
    /// i-vector of every estimate, per corpus mixture, in estimate order.
    pub estimate_ivectors: Vec<Vec<IVector>>,
    /// Canonically ordered `C x ivec_dim` block from the estimates, per corpus mixture.
    pub ivectors: Vec<Array2<f64>>,
    /// Corpus index of each test mixture.
    pub test_index: Vec<usize>,
    pub test_estimates: Vec<Vec<Waveform>>,
    pub reports: Vec<SdrReport>,
    /// Identification of each reference's matched estimate; `[test mixture][reference]`.
    pub id_outcomes: Vec<Vec<bool>>,
    pub identification: IdReport,
    pub metrics: LevelMetrics,
}

impl LevelArtifacts {
    pub fn mode_name(&self) -> &'static str {
        self.mode.map_or("baseline", Mode::name)
    }

    /// Relative directory of this level's artifacts, e.g. `level1/oracle`.
    pub fn dir_name(&self) -> String {
        format!("level{}/{}", self.level, self.mode_name())
    }

    /// Writes the network, training log, test estimates, i-vectors and level report under `root`.
    pub fn write(
        &self,
        root: &Path,
        corpus: &Corpus,
        stats: &NormalizationStats,
        seed: u64,
    ) -> Result<()> {
        let models = root.join("models").join(self.dir_name());
        network_container(&self.params, Some(stats), seed).save(&models.join("network.bsm"))?;
        std::fs::write(models.join("training_log.jsonl"), self.log.to_jsonl())?;
        let estimates = root.join("estimates").join(self.dir_name());
        for (&i, est) in self.test_index.iter().zip(&self.test_estimates) {
            let d = estimates.join(&corpus.mixtures[i].id);
            std::fs::create_dir_all(&d)?;
            for (k, e) in est.iter().enumerate() {
                e.write_wav(d.join(format!("est_{k}.wav")))?;
            }
        }
        let ivec_path = root
            .join("ivectors")
            .join(format!("level{}", self.level))
            .join(format!("{}.tsv", self.mode_name()));
        std::fs::create_dir_all(ivec_path.parent().expect("has parent"))?;
        let ids: Vec<&str> = corpus.mixtures.iter().map(|m| m.id.as_str()).collect();
        std::fs::write(ivec_path, ivectors_to_rows(&ids, &self.ivectors))?;
        #[derive(Serialize)]
        struct LevelReport<'a> {
            level: usize,
            mode: &'a str,
            best_validation_loss: f64,
            metrics: &'a LevelMetrics,
            identification: &'a IdReport,
            mixtures: Vec<(&'a str, &'a SdrReport)>,
        }
        let report = LevelReport {
            level: self.level,
            mode: self.mode_name(),
            best_validation_loss: self.best_validation_loss,
            metrics: &self.metrics,
            identification: &self.identification,
            mixtures: self
                .test_index
                .iter()
                .map(|&i| corpus.mixtures[i].id.as_str())
                .zip(&self.reports)
                .collect(),
        };
        let dir = root.join("reports");
        std::fs::create_dir_all(&dir)?;
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        std::fs::write(
            dir.join(format!("level{}_{}.json", self.level, self.mode_name())),
            json,
        )?;
        Ok(())
    }
}

/// One line per (mixture, slot): `id`, slot, then the coordinates in round-trip exponent form.
pub fn ivectors_to_rows(ids: &[&str], blocks: &[Array2<f64>]) -> String {
    let mut out = String::new();
    for (id, block) in ids.iter().zip(blocks) {
        for (slot, row) in block.rows().into_iter().enumerate() {
            out.push_str(&format!("{id}\t{slot}"));
            for v in row {
                out.push_str(&format!("\t{v:e}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`ivectors_to_rows`].
pub fn ivectors_from_tsv(text: &str) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || Error::InvalidArgument(format!("malformed i-vector line {}", n + 1));
        let mut fields = line.split('\t');
        let id = fields.next().ok_or_else(bad)?;
        let slot: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let entry = rows.entry(id.to_string()).or_default();
        if entry.len() != slot {
            return Err(bad());
        }
        entry.push(values);
    }
    rows.into_iter()
        .map(|(id, r)| {
            let dim = r[0].len();
            let flat: Vec<f64> = r.iter().flatten().cloned().collect();
            let block = Array2::from_shape_vec((r.len(), dim), flat)
                .map_err(|_| Error::InvalidArgument(format!("ragged i-vector block for {id}")))?;
            Ok((id, block))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Shared state of one experiment: corpus, speaker chain, normalized training data.
pub struct Experiment<'a> {
    pub config: ExperimentConfig,
    pub corpus: &'a Corpus,
    pub speaker: SpeakerModels,
    pub data: PreparedData,
    enrollment: Vec<(usize, IVector)>,
}

impl<'a> Experiment<'a> {
    pub fn new(
        config: &ExperimentConfig,
        corpus: &'a Corpus,
        speaker: SpeakerModels,
    ) -> Result<Self> {
        config.validate()?;
        let data = prepare_examples(corpus, &config.dsp)?;
        let enrollment = speaker.enrollment_models(corpus)?;
        Ok(Self {
            config: config.clone(),
            corpus,
            speaker,
            data,
            enrollment,
        })
    }

    /// Speaker blocks from the scaled reference sources of every mixture.
    pub fn oracle_inputs(&self) -> Result<Vec<Array2<f64>>> {
        self.corpus
            .mixtures
            .par_iter()
            .map(|m| {
                let ivs = m
                    .sources
                    .iter()
                    .map(|s| self.speaker.ivector(s))
                    .collect::<Result<Vec<_>>>()?;
                order_ivectors(&m.sources, &ivs)
            })
            .collect()
    }

    /// Level 0 takes no `prev`. Level `l >= 1` takes its speaker blocks from the references
    /// (oracle) or from `prev`'s estimates (realistic), and starts from `init` if given,
    /// otherwise from `prev`'s network.
    pub fn run_level(
        &self,
        level: usize,
        mode: Option<Mode>,
        prev: Option<&LevelArtifacts>,
        init: Option<&NetworkParameters>,
    ) -> Result<LevelArtifacts> {
        if level == 0 {
            if prev.is_some() || mode.is_some() {
                return Err(Error::InvalidArgument(
                    "level 0 takes no previous level or mode".into(),
                ));
            }
            return self.run_level_with(0, None, None, None);
        }
        let prev =
            prev.ok_or_else(|| Error::MissingDependency(format!("level {} artifacts", level - 1)))?;
        let mode =
            mode.ok_or_else(|| Error::InvalidArgument(format!("level {level} needs a mode")))?;
        let inputs = match mode {
            Mode::Oracle => self.oracle_inputs()?,
            Mode::Realistic => prev.ivectors.clone(),
        };
        self.run_level_with(
            level,
            Some(mode),
            Some(inputs),
            Some(init.unwrap_or(&prev.params)),
        )
    }

    /// Trains a level network on explicit speaker blocks (one per corpus mixture) and evaluates it.
    pub fn run_level_with(
        &self,
        level: usize,
        mode: Option<Mode>,
        inputs: Option<Vec<Array2<f64>>>,
        init: Option<&NetworkParameters>,
    ) -> Result<LevelArtifacts> {
        if let Some(inp) = &inputs {
            if inp.len() != self.corpus.mixtures.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} speaker blocks for {} mixtures",
                    inp.len(),
                    self.corpus.mixtures.len()
                )));
            }
        }
        let width = inputs
            .as_ref()
            .map_or(0, |v| v.first().map_or(0, |b| b.len()));
        let with_inputs = |set: &[TrainingExample], index: &[usize]| -> Vec<TrainingExample> {
            set.iter()
                .zip(index)
                .map(|(ex, &i)| TrainingExample {
                    ivectors: inputs.as_ref().map(|v| v[i].clone()),
                    ..ex.clone()
                })
                .collect()
        };
        let train_set = with_inputs(&self.data.train, &self.data.train_index);
        let validation_set = with_inputs(&self.data.validation, &self.data.validation_index);
        let mut trainer = TrainerConfig {
            seed: self.config.trainer.seed.wrapping_add(level as u64),
            ..self.config.trainer.clone()
        };
        if level > 0 {
            if let Some(lr) = self.config.pipeline.adapted_initial_lr {
                trainer.initial_lr = lr;
            }
        }
        let widened;
        let start = match init {
            Some(p) => {
                widened = p.with_ivector_inputs(width);
                Init::From(&widened)
            }
            None => {
                let mut shape = self.config.network_shape(level);
                shape.ivector_width = width;
                Init::Random(shape)
            }
        };
        let outcome = train(&trainer, &train_set, &validation_set, start)?;
        drop((train_set, validation_set));
        self.evaluate(
            level,
            mode,
            outcome.params,
            inputs,
            outcome.log,
            outcome.best_validation_loss,
        )
    }

    /// Separates every mixture with `params`, extracts i-vectors from the estimates and scores
    /// the test mixtures.
    pub fn evaluate(
        &self,
        level: usize,
        mode: Option<Mode>,
        params: NetworkParameters,
        inputs: Option<Vec<Array2<f64>>>,
        log: TrainingLog,
        best_validation_loss: f64,
    ) -> Result<LevelArtifacts> {
        let sep = self.config.separation();
        let c = self.config.pipeline.n_sources;
        let stats = &self.data.stats;
        let separated = self
            .corpus
            .mixtures
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let s = separate(
                    &params,
                    Some(stats),
                    m.mixture(),
                    inputs.as_ref().map(|v| &v[i]),
                    c,
                    &sep,
                )?;
                let ivs = s
                    .estimates
                    .iter()
                    .map(|e| self.speaker.ivector(e))
                    .collect::<Result<Vec<_>>>()?;
                let block = order_ivectors(&s.estimates, &ivs)?;
                Ok((s.estimates, ivs, block))
            })
            .collect::<Result<Vec<_>>>()?;
        let test_index: Vec<usize> = (0..self.corpus.mixtures.len())
            .filter(|&i| self.corpus.mixtures[i].split == Split::Test)
            .collect();
        let reports = test_index
            .par_iter()
            .map(|&i| {
                let m = &self.corpus.mixtures[i];
                sdr_improvement(&separated[i].0, &m.sources, m.mixture())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut probes = Vec::new();
        for (&i, r) in test_index.iter().zip(&reports) {
            for (j, &speaker) in self.corpus.mixtures[i].speakers.iter().enumerate() {
                probes.push((separated[i].1[r.permutation[j]].clone(), speaker));
            }
        }
        let identification = speaker_id_eval(&self.enrollment, &probes)?;
        let mut outcomes = identification.outcomes.iter().cloned();
        let id_outcomes = test_index
            .iter()
            .map(|&i| {
                (0..self.corpus.mixtures[i].speakers.len())
                    .map(|_| outcomes.next().expect("one per probe"))
                    .collect()
            })
            .collect();
        let metrics = LevelMetrics {
            mean_sdr_improvement: mean(reports.iter().map(|r| r.mean_improvement)),
            mean_mixture_sdr: mean(reports.iter().flat_map(|r| r.mixture_sdr.iter().cloned())),
            identification_accuracy: (identification.total > 0).then_some(identification.accuracy),
        };
        let mut estimate_ivectors = Vec::with_capacity(separated.len());
        let mut ivectors = Vec::with_capacity(separated.len());
        let mut all_estimates = Vec::with_capacity(separated.len());
        for (est, ivs, block) in separated {
            all_estimates.push(est);
            estimate_ivectors.push(ivs);
            ivectors.push(block);
        }
        let test_estimates = test_index
            .iter()
            .map(|&i| std::mem::take(&mut all_estimates[i]))
            .collect();
        Ok(LevelArtifacts {
            level,
            mode,
            params,
            log,
            best_validation_loss,
            inputs: inputs.unwrap_or_default(),
            estimate_ivectors,
            ivectors,
            test_index,
            test_estimates,
            reports,
            id_outcomes,
            identification,
            metrics,
        })
    }
}
