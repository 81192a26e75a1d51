use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use blindsep::cluster::{separate, Separation};
use blindsep::container::{
    file_sha256, lda_container, network_from_container, tv_container, ubm_container,
    ubm_from_container, ModelContainer, Tensor,
};
use blindsep::dsp::{NormalizationStats, Waveform};
use blindsep::eval::{sdr_improvement, SdrReport};
use blindsep::net::NetworkParameters;
use blindsep::pipeline::{
    fit_lda, fit_tv, fit_ubm, generate_corpus, ivectors_from_tsv, order_ivectors, run_experiment,
    Corpus, Experiment, ExperimentConfig, Mode, SpeakerConfig, SpeakerModels,
};
use blindsep::{Error, Result};
use log::info;
use ndarray::Array2;
use serde::Serialize;

fn speaker_dir(work: &Path) -> PathBuf {
    work.join("models").join("speaker")
}

fn level_dir(level: usize, mode: Option<Mode>) -> String {
    format!("level{level}/{}", mode.map_or("baseline", Mode::name))
}

/// The level a level-`l` network of `mode` builds on.
fn previous(level: usize, mode: Mode) -> Option<Mode> {
    (level > 1).then_some(mode)
}

fn network_path(work: &Path, level: usize, mode: Option<Mode>) -> PathBuf {
    work.join("models")
        .join(level_dir(level, mode))
        .join("network.bsm")
}

fn load_network(
    work: &Path,
    level: usize,
    mode: Option<Mode>,
) -> Result<(NetworkParameters, Option<NormalizationStats>)> {
    let path = network_path(work, level, mode);
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "{} network {} (run `train --stage net --level {level}` first)",
            level_dir(level, mode),
            path.display()
        )));
    }
    network_from_container(&ModelContainer::load(&path)?)
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency(format!(
            "{what} {} ({hint})",
            path.display()
        )))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct IterationRecord {
    iteration: usize,
    objective: f64,
}

fn iteration_log(values: &[f64]) -> impl Iterator<Item = IterationRecord> + '_ {
    values
        .iter()
        .enumerate()
        .map(|(iteration, &objective)| IterationRecord {
            iteration,
            objective,
        })
}

pub fn corpus(config: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    if out.join("manifest.json").exists() {
        if !force {
            return Err(Error::Exists(out.to_path_buf()));
        }
        std::fs::remove_dir_all(out)?;
    }
    let corpus = generate_corpus(&config.corpus)?;
    corpus.write(out)?;
    info!(
        "wrote {} utterances and {} mixtures to {}",
        corpus.utterances.len(),
        corpus.mixtures.len(),
        out.display()
    );
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::load(dir)?;
    info!(
        "loaded corpus {} ({} mixtures)",
        dir.display(),
        corpus.mixtures.len()
    );
    Ok(corpus)
}

pub fn train_ubm(config: &ExperimentConfig, corpus: &Corpus, work: &Path) -> Result<()> {
    let dir = speaker_dir(work);
    let t = fit_ubm(corpus, &config.speaker)?;
    ubm_container(&t.ubm, config.pipeline.seed).save(&dir.join("ubm.bsm"))?;
    write_jsonl(&dir.join("ubm_log.jsonl"), iteration_log(&t.log_likelihood))?;
    info!(
        "UBM: {} components, final log-likelihood {:e}",
        t.ubm.weights.len(),
        t.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn train_tv(config: &ExperimentConfig, corpus: &Corpus, work: &Path) -> Result<()> {
    let dir = speaker_dir(work);
    let ubm_path = dir.join("ubm.bsm");
    require(&ubm_path, "UBM", "run `train --stage ubm` first")?;
    let ubm = ubm_from_container(&ModelContainer::load(&ubm_path)?)?;
    let t = fit_tv(corpus, &ubm, &config.speaker, config.pipeline.seed)?;
    tv_container(&t.model, &file_sha256(&ubm_path)?, config.pipeline.seed)
        .save(&dir.join("tv.bsm"))?;
    write_jsonl(&dir.join("tv_log.jsonl"), iteration_log(&t.auxiliary))?;
    info!("TV: rank {}", t.model.rank());
    Ok(())
}

pub fn train_lda(config: &ExperimentConfig, corpus: &Corpus, work: &Path) -> Result<()> {
    if !config.speaker.use_lda {
        return Err(Error::Config(
            "speaker.use_lda is false; set it to train an LDA".into(),
        ));
    }
    let dir = speaker_dir(work);
    require(
        &dir.join("tv.bsm"),
        "TV model",
        "run `train --stage tv` first",
    )?;
    let chain = SpeakerModels::load(
        &dir,
        &SpeakerConfig {
            use_lda: false,
            ..config.speaker
        },
    )?;
    let lda = fit_lda(corpus, &chain.ubm, &chain.tv, &config.speaker)?.expect("LDA enabled");
    lda_container(&lda, &file_sha256(&dir.join("tv.bsm"))?).save(&dir.join("lda.bsm"))?;
    info!(
        "LDA: {} -> {} dimensions",
        chain.tv.rank(),
        lda.output_dim()
    );
    Ok(())
}

fn load_speaker(config: &ExperimentConfig, work: &Path) -> Result<SpeakerModels> {
    let dir = speaker_dir(work);
    require(&dir.join("ubm.bsm"), "UBM", "run `train --stage ubm` first")?;
    require(
        &dir.join("tv.bsm"),
        "TV model",
        "run `train --stage tv` first",
    )?;
    if config.speaker.use_lda {
        require(&dir.join("lda.bsm"), "LDA", "run `train --stage lda` first")?;
    }
    SpeakerModels::load(&dir, &config.speaker)
}

fn ivector_inputs(corpus: &Corpus, path: &Path) -> Result<Vec<Array2<f64>>> {
    let blocks = ivectors_from_tsv(&std::fs::read_to_string(path)?)?;
    corpus
        .mixtures
        .iter()
        .map(|m| {
            blocks.get(&m.id).cloned().ok_or_else(|| {
                Error::MissingDependency(format!("i-vectors of {} in {}", m.id, path.display()))
            })
        })
        .collect()
}

pub fn train_net(
    config: &ExperimentConfig,
    corpus: &Corpus,
    work: &Path,
    level: usize,
    mode: Mode,
) -> Result<()> {
    // fail fast on missing artifacts before the data is prepared
    let prev = (level > 0).then(|| previous(level, mode));
    let prev_ivectors = work
        .join("ivectors")
        .join(format!("level{}", level.saturating_sub(1)))
        .join(format!(
            "{}.tsv",
            prev.flatten().map_or("baseline", Mode::name)
        ));
    let init_from_oracle = level > 0
        && mode == Mode::Realistic
        && config.pipeline.realistic_from_oracle
        && config.pipeline.modes.0;
    let mut init = None;
    if let Some(prev) = prev {
        init = Some(load_network(work, level - 1, prev)?.0);
        if mode == Mode::Realistic {
            require(
                &prev_ivectors,
                "estimate i-vectors",
                "written when the previous level is trained",
            )?;
        }
        if init_from_oracle {
            init = Some(load_network(work, level, Some(Mode::Oracle))?.0);
        }
    }
    let speaker = load_speaker(config, work)?;
    let exp = Experiment::new(config, corpus, speaker)?;
    let artifacts = if level == 0 {
        exp.run_level(0, None, None, None)?
    } else {
        let inputs = match mode {
            Mode::Oracle => exp.oracle_inputs()?,
            Mode::Realistic => ivector_inputs(corpus, &prev_ivectors)?,
        };
        exp.run_level_with(level, Some(mode), Some(inputs), init.as_ref())?
    };
    artifacts.write(work, corpus, &exp.data.stats, config.trainer.seed)?;
    info!(
        "{}: best validation loss {:e}, mean SDR improvement {}",
        artifacts.dir_name(),
        artifacts.best_validation_loss,
        artifacts
            .metrics
            .mean_sdr_improvement
            .map_or("n/a".into(), |v| format!("{v:.3} dB"))
    );
    Ok(())
}

fn mask_container(s: &Separation, level: usize, mode: Option<Mode>) -> ModelContainer {
    let mut c = ModelContainer::new("masks")
        .with_meta("level", level)
        .with_meta("mode", mode.map_or("baseline", Mode::name));
    for (k, m) in s.masks.masks.iter().enumerate() {
        c.push(Tensor::matrix(
            &format!("mask_{k}"),
            &m.mapv(|b| if b { 1.0 } else { 0.0 }),
        ));
    }
    c
}

pub fn separate_file(
    config: &ExperimentConfig,
    work: &Path,
    mixture_path: &Path,
    level: usize,
    mode: Mode,
    references: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let mixture = Waveform::read_wav(mixture_path)?;
    let sep = config.separation();
    let c = config.pipeline.n_sources;
    let run = |l: usize, m: Option<Mode>, block: Option<&Array2<f64>>| -> Result<Separation> {
        let (params, stats) = load_network(work, l, m)?;
        let s = separate(&params, stats.as_ref(), &mixture, block, c, &sep)?;
        info!(
            "{} pass on {}: {} estimates",
            level_dir(l, m),
            mixture_path.display(),
            s.estimates.len()
        );
        Ok(s)
    };
    let result = if level == 0 {
        run(0, None, None)?
    } else {
        let speaker = load_speaker(config, work)?;
        match mode {
            Mode::Oracle => {
                if references.len() != c {
                    return Err(Error::MissingDependency(format!(
                        "{c} --reference files for oracle separation (got {})",
                        references.len()
                    )));
                }
                let refs = references
                    .iter()
                    .map(Waveform::read_wav)
                    .collect::<Result<Vec<_>>>()?;
                let ivs = refs
                    .iter()
                    .map(|r| speaker.ivector(r))
                    .collect::<Result<Vec<_>>>()?;
                run(level, Some(mode), Some(&order_ivectors(&refs, &ivs)?))?
            }
            Mode::Realistic => {
                let mut s = run(0, None, None)?;
                for l in 1..=level {
                    let ivs = s
                        .estimates
                        .iter()
                        .map(|e| speaker.ivector(e))
                        .collect::<Result<Vec<_>>>()?;
                    let block = order_ivectors(&s.estimates, &ivs)?;
                    info!(
                        "extracted {} i-vectors from the {} estimates",
                        ivs.len(),
                        level_dir(l - 1, previous(l, mode))
                    );
                    s = run(l, Some(mode), Some(&block))?;
                }
                s
            }
        }
    };
    std::fs::create_dir_all(out)?;
    for (k, e) in result.estimates.iter().enumerate() {
        e.write_wav(out.join(format!("est_{k}.wav")))?;
    }
    mask_container(&result, level, (level > 0).then_some(mode)).save(&out.join("masks.bsm"))?;
    info!(
        "wrote {} estimates and masks.bsm to {}",
        result.estimates.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub mixtures: BTreeMap<String, SdrReport>,
    pub mean_sdr: f64,
    pub mean_sdr_improvement: f64,
}

impl EvaluationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mixture\tsdr\tmixture_sdr\tsdr_improvement\n");
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        for (id, r) in &self.mixtures {
            out.push_str(&format!(
                "{id}\t{}\t{}\t{:.3}\n",
                fmt(&r.sdr),
                fmt(&r.mixture_sdr),
                r.mean_improvement
            ));
        }
        out.push_str(&format!(
            "mean\t{:.3}\t\t{:.3}\n",
            self.mean_sdr, self.mean_sdr_improvement
        ));
        out
    }
}

fn estimate_files(dir: &Path) -> Vec<PathBuf> {
    (0..)
        .map(|k| dir.join(format!("est_{k}.wav")))
        .take_while(|p| p.exists())
        .collect()
}

/// Scores `estimates/<id>/est_k.wav` against `references/<id>/{s_k,mix}.wav`; a directory
/// holding `est_*.wav` directly is scored against the files directly under `references`.
pub fn evaluate(estimates: &Path, references: &Path) -> Result<EvaluationReport> {
    require(estimates, "estimates directory", "nothing to evaluate")?;
    require(
        references,
        "references directory",
        "nothing to compare against",
    )?;
    let mut items: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    if estimate_files(estimates).is_empty() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(estimates)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        dirs.sort();
        for d in dirs
            .into_iter()
            .filter(|d| d.is_dir() && !estimate_files(d).is_empty())
        {
            let id = d
                .file_name()
                .expect("directory entry")
                .to_string_lossy()
                .into_owned();
            items.push((id.clone(), d, references.join(id)));
        }
    } else {
        items.push((
            ".".into(),
            estimates.to_path_buf(),
            references.to_path_buf(),
        ));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no est_*.wav files under {}",
            estimates.display()
        )));
    }
    let mut mixtures = BTreeMap::new();
    for (id, est_dir, ref_dir) in items {
        let est = estimate_files(&est_dir)
            .iter()
            .map(Waveform::read_wav)
            .collect::<Result<Vec<_>>>()?;
        let mut refs = Vec::new();
        for k in 0..est.len() {
            let p = ref_dir.join(format!("s{k}.wav"));
            require(
                &p,
                "reference",
                &format!(
                    "needed for {}",
                    est_dir.join(format!("est_{k}.wav")).display()
                ),
            )?;
            refs.push(Waveform::read_wav(&p)?);
        }
        let mix = ref_dir.join("mix.wav");
        require(&mix, "mixture", "needed for the improvement")?;
        mixtures.insert(
            id,
            sdr_improvement(&est, &refs, &Waveform::read_wav(&mix)?)?,
        );
    }
    let n = mixtures.len() as f64;
    let mean_sdr = mixtures
        .values()
        .map(|r| r.sdr.iter().sum::<f64>() / r.sdr.len() as f64)
        .sum::<f64>()
        / n;
    let mean_sdr_improvement = mixtures.values().map(|r| r.mean_improvement).sum::<f64>() / n;
    Ok(EvaluationReport {
        mixtures,
        mean_sdr,
        mean_sdr_improvement,
    })
}

/// Loads the corpus at `dir`, or generates and writes it when absent.
pub fn corpus_for(config: &ExperimentConfig, dir: &Path) -> Result<Corpus> {
    if dir.join("manifest.json").exists() {
        let corpus = load_corpus(dir)?;
        if corpus.spec != config.corpus {
            return Err(Error::Config(format!(
                "corpus at {} was generated from a different [corpus] section",
                dir.display()
            )));
        }
        Ok(corpus)
    } else {
        let corpus = generate_corpus(&config.corpus)?;
        corpus.write(dir)?;
        info!("generated corpus at {}", dir.display());
        Ok(corpus)
    }
}

pub fn experiment(config: &ExperimentConfig, corpus_dir: &Path, work: &Path) -> Result<String> {
    let corpus = corpus_for(config, corpus_dir)?;
    let outcome = run_experiment(config, &corpus)?;
    outcome.write(work, &corpus)?;
    let r = &outcome.report;
    Ok(format!(
        "{}\n{}\n{}",
        r.separation_tsv(),
        r.identification_tsv(),
        r.representation_tsv()
    ))
}
