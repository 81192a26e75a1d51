//! MFCC, voice-activity selection and i-vector extraction for whole waveforms.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use super::{Corpus, SpeakerConfig, Utterance};
use crate::container::{
    file_sha256, lda_container, lda_from_container, tv_container, tv_from_container, ubm_container,
    ubm_from_container, ModelContainer,
};
use crate::dsp::{energy_vad, mfcc, Waveform};
use crate::error::{Error, Result};
use crate::eval::{speaker_id_eval, IdReport};
use crate::speaker::{
    accumulate_stats, extract_ivector, project_lda, speaker_models, train_lda, train_tv, train_ubm,
    BaumWelchStats, GmmUbm, IVector, LdaProjection, TotalVariabilityModel, TvTraining, UbmTraining,
};

/// Voiced MFCC frames of `w`.
pub fn speaker_frames(w: &Waveform, config: &SpeakerConfig) -> Result<Array2<f64>> {
    let f = mfcc(w, config.mfcc_coeffs)?;
    let keep = energy_vad(&f, config.vad_threshold_db);
    Ok(f.select_frames(&keep).rows)
}

fn development(corpus: &Corpus) -> Vec<&Utterance> {
    corpus.development().collect()
}

pub fn fit_ubm(corpus: &Corpus, config: &SpeakerConfig) -> Result<UbmTraining> {
    let frames = development(corpus)
        .par_iter()
        .map(|u| speaker_frames(u.waveform(), config))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    train_ubm(&views, config.ubm_components, config.ubm_iterations)
}

fn utterance_stats(
    ubm: &GmmUbm,
    utterances: &[&Utterance],
    config: &SpeakerConfig,
) -> Result<Vec<BaumWelchStats>> {
    utterances
        .par_iter()
        .map(|u| accumulate_stats(ubm, speaker_frames(u.waveform(), config)?.view()))
        .collect()
}

pub fn fit_tv(
    corpus: &Corpus,
    ubm: &GmmUbm,
    config: &SpeakerConfig,
    seed: u64,
) -> Result<TvTraining> {
    let stats = utterance_stats(ubm, &development(corpus), config)?;
    train_tv(&stats, ubm, config.tv_rank, config.tv_iterations, seed)
}

/// LDA on development i-vectors labelled by speaker, or `None` when LDA is disabled.
pub fn fit_lda(
    corpus: &Corpus,
    ubm: &GmmUbm,
    tv: &TotalVariabilityModel,
    config: &SpeakerConfig,
) -> Result<Option<LdaProjection>> {
    if !config.use_lda {
        return Ok(None);
    }
    let utts = development(corpus);
    let stats = utterance_stats(ubm, &utts, config)?;
    let labelled = stats
        .par_iter()
        .zip(&utts)
        .map(|(s, u)| Ok((extract_ivector(tv, s)?, u.speaker)))
        .collect::<Result<Vec<_>>>()?;
    train_lda(&labelled, config.lda_dim).map(Some)
}

/// The trained speaker chain: UBM, total variability model and optional LDA.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModels {
    pub config: SpeakerConfig,
    pub ubm: GmmUbm,
    pub tv: TotalVariabilityModel,
    pub lda: Option<LdaProjection>,
}

impl SpeakerModels {
    pub fn train(corpus: &Corpus, config: &SpeakerConfig, seed: u64) -> Result<Self> {
        let ubm = fit_ubm(corpus, config)?.ubm;
        let tv = fit_tv(corpus, &ubm, config, seed)?.model;
        let lda = fit_lda(corpus, &ubm, &tv, config)?;
        Ok(Self {
            config: *config,
            ubm,
            tv,
            lda,
        })
    }

    /// Writes `ubm.bsm`, `tv.bsm` and, when present, `lda.bsm` into `dir`. Each container
    /// records the hash of the one it was trained on.
    pub fn write(&self, dir: &Path, seed: u64) -> Result<()> {
        let ubm = ubm_container(&self.ubm, seed);
        ubm.save(&dir.join("ubm.bsm"))?;
        let tv = tv_container(&self.tv, &ubm.sha256_hex(), seed);
        tv.save(&dir.join("tv.bsm"))?;
        if let Some(lda) = &self.lda {
            lda_container(lda, &tv.sha256_hex()).save(&dir.join("lda.bsm"))?;
        }
        Ok(())
    }

    /// Loads the chain written by [`SpeakerModels::write`], checking the hash links.
    pub fn load(dir: &Path, config: &SpeakerConfig) -> Result<Self> {
        let (ubm_path, tv_path) = (dir.join("ubm.bsm"), dir.join("tv.bsm"));
        let ubm = ubm_from_container(&ModelContainer::load(&ubm_path)?)?;
        let tv_c = ModelContainer::load(&tv_path)?;
        if tv_c.meta("ubm_sha256")? != file_sha256(&ubm_path)? {
            return Err(Error::MissingDependency(format!(
                "the UBM that {} was trained on ({} has changed)",
                tv_path.display(),
                ubm_path.display()
            )));
        }
        let tv = tv_from_container(&tv_c)?;
        let lda = if config.use_lda {
            let lda_path = dir.join("lda.bsm");
            let c = ModelContainer::load(&lda_path)?;
            if c.meta("tv_sha256")? != file_sha256(&tv_path)? {
                return Err(Error::MissingDependency(format!(
                    "the TV model that {} was trained on ({} has changed)",
                    lda_path.display(),
                    tv_path.display()
                )));
            }
            Some(lda_from_container(&c)?)
        } else {
            None
        };
        Ok(Self {
            config: *config,
            ubm,
            tv,
            lda,
        })
    }

    /// Width of the vectors returned by [`SpeakerModels::ivector`].
    pub fn dim(&self) -> usize {
        self.lda.as_ref().map_or(self.tv.rank(), |l| l.output_dim())
    }

    pub fn stats(&self, w: &Waveform) -> Result<BaumWelchStats> {
        accumulate_stats(&self.ubm, speaker_frames(w, &self.config)?.view())
    }

    /// i-vector of `w`, LDA-projected when an LDA is present.
    pub fn ivector(&self, w: &Waveform) -> Result<IVector> {
        let raw = extract_ivector(&self.tv, &self.stats(w)?)?;
        match &self.lda {
            Some(lda) => project_lda(lda, &raw),
            None => Ok(raw),
        }
    }

    /// Mean enrollment i-vector of every speaker.
    pub fn enrollment_models(&self, corpus: &Corpus) -> Result<Vec<(usize, IVector)>> {
        let utts: Vec<&Utterance> = corpus.enrollment().collect();
        if utts.is_empty() {
            return Err(Error::EmptyModels);
        }
        let labelled = utts
            .par_iter()
            .map(|u| Ok((self.ivector(u.waveform())?, u.speaker)))
            .collect::<Result<Vec<_>>>()?;
        Ok(speaker_models(&labelled))
    }

    /// Identification of the clean test utterances against the enrollment models.
    pub fn clean_identification(&self, corpus: &Corpus) -> Result<IdReport> {
        let models = self.enrollment_models(corpus)?;
        let utts: Vec<&Utterance> = corpus.test_utterances().collect();
        let probes = utts
            .par_iter()
            .map(|u| Ok((self.ivector(u.waveform())?, u.speaker)))
            .collect::<Result<Vec<_>>>()?;
        speaker_id_eval(&models, &probes)
    }
}
