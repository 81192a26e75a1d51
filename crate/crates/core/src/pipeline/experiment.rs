//! The full experiment: speaker chain, baseline, adapted levels and summary tables.

use std::path::Path;

use rayon::prelude::*;

use super::{
    Corpus, DspConfig, Experiment, ExperimentConfig, LevelArtifacts, Mode, SpeakerModels, Split,
};
use crate::cluster::reconstruct;
use crate::dsp::{stft, NormalizationStats};
use crate::error::Result;
use crate::eval::{
    ideal_binary_mask, representation_analysis, sdr_improvement, ExperimentReport, IdReport,
    IdentificationRow, SdrReport, SeparationRow,
};

/// Ideal-binary-mask separation of every test mixture.
pub fn ideal_mask_reports(corpus: &Corpus, dsp: &DspConfig) -> Result<Vec<SdrReport>> {
    let test: Vec<_> = corpus.split(Split::Test).collect();
    test.par_iter()
        .map(|m| {
            let spec = stft(m.mixture(), dsp.window_len, dsp.hop)?;
            let sources = m
                .sources
                .iter()
                .map(|s| stft(s, dsp.window_len, dsp.hop))
                .collect::<Result<Vec<_>>>()?;
            let estimates = reconstruct(&spec, &ideal_binary_mask(&sources)?)?;
            sdr_improvement(&estimates, &m.sources, m.mixture())
        })
        .collect()
}

pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub speaker: SpeakerModels,
    pub stats: NormalizationStats,
    pub clean_identification: IdReport,
    pub ideal_mask: Vec<SdrReport>,
    /// Level 0 first, then per level the oracle and realistic runs that were enabled.
    pub levels: Vec<LevelArtifacts>,
    pub report: ExperimentReport,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl ExperimentOutcome {
    pub fn level(&self, level: usize, mode: Option<Mode>) -> Option<&LevelArtifacts> {
        self.levels
            .iter()
            .find(|l| l.level == level && l.mode == mode)
    }

    /// Writes models, estimates, i-vectors and report tables under `root`.
    pub fn write(&self, root: &Path, corpus: &Corpus) -> Result<()> {
        self.speaker.write(
            &root.join("models").join("speaker"),
            self.config.pipeline.seed,
        )?;
        for level in &self.levels {
            level.write(root, corpus, &self.stats, self.config.trainer.seed)?;
        }
        let reports = root.join("reports");
        std::fs::create_dir_all(&reports)?;
        std::fs::write(reports.join("report.json"), self.report.to_json())?;
        std::fs::write(reports.join("separation.tsv"), self.report.separation_tsv())?;
        std::fs::write(
            reports.join("identification.tsv"),
            self.report.identification_tsv(),
        )?;
        std::fs::write(
            reports.join("representation.tsv"),
            self.report.representation_tsv(),
        )?;
        std::fs::write(reports.join("config.toml"), self.config.to_toml())?;
        Ok(())
    }
}

fn build_report(
    config: &ExperimentConfig,
    dim: usize,
    levels: &[LevelArtifacts],
    clean: &IdReport,
    ideal: &[SdrReport],
) -> Result<ExperimentReport> {
    let label = format!("dim={dim}");
    let find = |l: usize, m: Option<Mode>| levels.iter().find(|a| a.level == l && a.mode == m);
    let mut report = ExperimentReport {
        mixture_mean_sdr: levels[0].metrics.mean_mixture_sdr,
        ideal_mask_mean_sdr_improvement: mean(ideal.iter().map(|r| r.mean_improvement)),
        clean_identification_accuracy: (clean.total > 0).then_some(clean.accuracy),
        ..Default::default()
    };
    for a in levels {
        if let Some(mean_sdr_improvement) = a.metrics.mean_sdr_improvement {
            report.separation.push(SeparationRow {
                label: label.clone(),
                level: a.level,
                mode: a.mode_name().to_string(),
                mean_sdr_improvement,
                n_sources: a.reports.iter().map(|r| r.improvement.len()).sum(),
            });
        }
    }
    for l in 1..=config.pipeline.levels {
        let acc = |m: Option<Mode>| find(l, m).and_then(|a| a.metrics.identification_accuracy);
        report.identification.push(IdentificationRow {
            label: format!("{label} level{l}"),
            baseline: find(l - 1, if l == 1 { None } else { Some(Mode::Realistic) })
                .and_then(|a| a.metrics.identification_accuracy),
            oracle: acc(Some(Mode::Oracle)),
            realistic: acc(Some(Mode::Realistic)),
        });
        // sources are split by whether the i-vector the realistic network received was correct
        let prev = find(l - 1, if l == 1 { None } else { Some(Mode::Realistic) });
        if let (Some(prev), Some(o), Some(r)) = (
            prev,
            find(l, Some(Mode::Oracle)),
            find(l, Some(Mode::Realistic)),
        ) {
            if !r.reports.is_empty() {
                let row_label = if config.pipeline.levels == 1 {
                    label.clone()
                } else {
                    format!("{label} level{l}")
                };
                report.representation.push(representation_analysis(
                    &row_label,
                    &r.reports,
                    &prev.id_outcomes,
                    &o.reports,
                )?);
            }
        }
    }
    Ok(report)
}

/// Runs every configured level on `corpus` and assembles the summary report.
pub fn run_experiment(config: &ExperimentConfig, corpus: &Corpus) -> Result<ExperimentOutcome> {
    config.validate()?;
    let speaker = SpeakerModels::train(corpus, &config.speaker, config.pipeline.seed)?;
    let clean_identification = speaker.clean_identification(corpus)?;
    let ideal_mask = ideal_mask_reports(corpus, &config.dsp)?;
    let exp = Experiment::new(config, corpus, speaker)?;
    let mut levels = vec![exp.run_level(0, None, None, None)?];
    let (mut prev_oracle, mut prev_realistic) = (0, 0);
    for l in 1..=config.pipeline.levels {
        let mut oracle_params = None;
        if config.pipeline.modes.0 {
            let a = exp.run_level(l, Some(Mode::Oracle), Some(&levels[prev_oracle]), None)?;
            oracle_params = Some(a.params.clone());
            levels.push(a);
            prev_oracle = levels.len() - 1;
        }
        if config.pipeline.modes.1 {
            let init = if config.pipeline.realistic_from_oracle {
                oracle_params.as_ref()
            } else {
                None
            };
            let a = exp.run_level(
                l,
                Some(Mode::Realistic),
                Some(&levels[prev_realistic]),
                init,
            )?;
            levels.push(a);
            prev_realistic = levels.len() - 1;
        }
    }
    let report = build_report(
        config,
        exp.speaker.dim(),
        &levels,
        &clean_identification,
        &ideal_mask,
    )?;
    Ok(ExperimentOutcome {
        config: config.clone(),
        speaker: exp.speaker,
        stats: exp.data.stats,
        clean_identification,
        ideal_mask,
        levels,
        report,
    })
}
