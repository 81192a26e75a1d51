//! Training protocol for the embedding network.
//!
//! Adam updates over mini-batches. Every `validation_interval_batches` batches the validation
//! loss is measured: an increase restores the last validated model and halves the learning
//! rate, and `patience` consecutive increases end the stage. Training optionally starts with a
//! curriculum stage on fixed-length segments whose result initializes full-length training.
//! Several independent runs can be made; the one with the lowest validation loss wins.

use std::fmt::Write as _;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::AffinityTarget;
use super::model::{NetworkParameters, NetworkShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub initial_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub validation_interval_batches: usize,
    pub patience: usize,
    pub input_noise_std: f64,
    /// Segment length of the curriculum stage in frames; 0 skips the stage.
    pub curriculum_segment_frames: usize,
    pub restarts: usize,
    /// Upper bound on passes over the training set per stage.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            validation_interval_batches: 10,
            patience: 3,
            input_noise_std: 0.6,
            curriculum_segment_frames: 100,
            restarts: 6,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.initial_lr > 0.0
            && self.beta1 > 0.0
            && self.beta2 > 0.0
            && self.epsilon > 0.0
            && self.batch_size > 0
            && self.validation_interval_batches > 0
            && self.patience >= 1
            && self.input_noise_std >= 0.0
            && self.restarts >= 1
            && self.max_epochs >= 1;
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid trainer config {self:?}"
            )))
        }
    }
}

/// One utterance (or segment) ready for training.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// Normalized features, `T x F`.
    pub features: Array2<f64>,
    /// Speaker block appended to every frame, `C x ivec_dim`.
    pub ivectors: Option<Array2<f64>>,
    pub targets: AffinityTarget,
    /// Row-major retained-bin flags, length `T * F`.
    pub keep: Vec<bool>,
}

impl TrainingExample {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    /// Non-overlapping `len`-frame segments. An example shorter than `len` is kept whole.
    pub fn segments(&self, len: usize) -> Vec<TrainingExample> {
        let frames = self.frames();
        if len == 0 || frames <= len {
            return vec![self.clone()];
        }
        let f = self.features.ncols();
        (0..frames / len)
            .map(|k| {
                let (t0, t1) = (k * len, (k + 1) * len);
                let labels = self.targets.labels[t0 * f..t1 * f].to_vec();
                TrainingExample {
                    features: self.features.slice(s![t0..t1, ..]).to_owned(),
                    ivectors: self.ivectors.clone(),
                    targets: AffinityTarget::from_labels(labels, self.targets.n_sources())
                        .expect("labels already validated"),
                    keep: self.keep[t0 * f..t1 * f].to_vec(),
                }
            })
            .collect()
    }
}

/// Adam with bias correction; moments are stored in parameter-shaped containers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: NetworkParameters,
    v: NetworkParameters,
}

impl Adam {
    pub fn new(config: &TrainerConfig, like: &NetworkParameters) -> Self {
        Self {
            lr: config.initial_lr,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut NetworkParameters, grads: &NetworkParameters) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.m.zip_apply(grads, |m, g| {
            for (m, g) in m.iter_mut().zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
            }
        });
        self.v.zip_apply(grads, |v, g| {
            for (v, g) in v.iter_mut().zip(g) {
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
        });
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.epsilon);
        // m and v are walked in the same canonical order as params
        let m: Vec<f64> = self
            .m
            .tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter().cloned())
            .collect();
        let v: Vec<f64> = self
            .v
            .tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter().cloned())
            .collect();
        let mut k = 0;
        params.for_each_mut(|p| {
            for x in p.iter_mut() {
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                k += 1;
            }
        });
    }
}

/// What the validation bookkeeping decided after one measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationOutcome {
    /// Loss did not increase; the current model becomes the validated checkpoint.
    Accept,
    /// Loss increased; restore the checkpoint and halve the learning rate.
    Restore,
    /// Loss increased `patience` times in a row; restore the checkpoint and stop.
    Stop,
}

#[derive(Debug, Clone)]
pub struct ValidationSchedule {
    patience: usize,
    last: Option<f64>,
    consecutive_increases: usize,
}

impl ValidationSchedule {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            last: None,
            consecutive_increases: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.last
    }

    pub fn observe(&mut self, loss: f64) -> ValidationOutcome {
        match self.last {
            Some(prev) if loss > prev || loss.is_nan() => {
                self.consecutive_increases += 1;
                if self.consecutive_increases >= self.patience {
                    ValidationOutcome::Stop
                } else {
                    ValidationOutcome::Restore
                }
            }
            _ => {
                self.last = Some(loss);
                self.consecutive_increases = 0;
                ValidationOutcome::Accept
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub run: usize,
    pub stage: String,
    pub step: usize,
    pub learning_rate: f64,
    /// Mean per-example loss divided by the squared retained-bin count.
    pub train_loss: Option<f64>,
    pub validation_loss: Option<f64>,
    /// Raw Frobenius objective summed over the validation set.
    pub validation_loss_raw: Option<f64>,
    pub best_validation_loss: Option<f64>,
    pub event: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("serializable")).unwrap();
        }
        out
    }

    pub fn events<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.event == event)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParameters,
    pub best_validation_loss: f64,
    pub run: usize,
    pub log: TrainingLog,
}

/// Starting point for [`train`].
pub enum Init<'a> {
    Random(NetworkShape),
    From(&'a NetworkParameters),
}

struct SetLoss {
    normalized: f64,
    raw: f64,
}

fn set_loss(params: &NetworkParameters, set: &[TrainingExample]) -> Result<SetLoss> {
    let terms = set
        .par_iter()
        .map(|ex| {
            let x = params.build_input(ex.features.view(), ex.ivectors.as_ref())?;
            params.loss(&x, &ex.targets, &ex.keep)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len().max(1) as f64;
    Ok(SetLoss {
        normalized: terms.iter().map(|t| t.normalized()).sum::<f64>() / n,
        raw: terms.iter().map(|t| t.loss).sum(),
    })
}

fn noisy_input(
    params: &NetworkParameters,
    ex: &TrainingExample,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let mut x = params.build_input(ex.features.view(), ex.ivectors.as_ref())?;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        x.mapv_inplace(|v| v + normal.sample(rng));
    }
    Ok(x)
}

/// Mean normalized loss and gradient over a batch. Per-example work runs in parallel; the
/// reduction is sequential in batch order.
fn batch_step(
    params: &NetworkParameters,
    batch: &[&TrainingExample],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, NetworkParameters)> {
    let inputs = batch
        .iter()
        .map(|ex| noisy_input(params, ex, noise_std, rng))
        .collect::<Result<Vec<_>>>()?;
    let results = inputs
        .par_iter()
        .zip(batch.par_iter())
        .map(|(x, ex)| params.loss_and_grad(x, &ex.targets, &ex.keep))
        .collect::<Result<Vec<_>>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let scale_all = 1.0 / batch.len() as f64;
    for (terms, grads) in &results {
        let n = terms.retained.max(1) as f64;
        let scale = scale_all / (n * n);
        loss += terms.normalized() * scale_all;
        total.zip_apply(grads, |t, g| {
            for (t, g) in t.iter_mut().zip(g) {
                *t += scale * g;
            }
        });
    }
    Ok((loss, total))
}

struct StageResult {
    params: NetworkParameters,
    best: f64,
    diverged: bool,
}

#[allow(clippy::too_many_arguments)]
fn train_stage(
    config: &TrainerConfig,
    run: usize,
    stage: &str,
    init: NetworkParameters,
    train_set: &[TrainingExample],
    validation_set: &[TrainingExample],
    rng: &mut ChaCha8Rng,
    log: &mut TrainingLog,
) -> Result<StageResult> {
    let mut params = init;
    let mut adam = Adam::new(config, &params);
    let mut schedule = ValidationSchedule::new(config.patience);
    let initial = set_loss(&params, validation_set)?;
    schedule.observe(initial.normalized);
    let mut checkpoint = (params.clone(), adam.clone());
    let record = |step: usize,
                  lr: f64,
                  train: Option<f64>,
                  val: Option<&SetLoss>,
                  best: Option<f64>,
                  event: &str| LogRecord {
        run,
        stage: stage.to_string(),
        step,
        learning_rate: lr,
        train_loss: train,
        validation_loss: val.map(|v| v.normalized),
        validation_loss_raw: val.map(|v| v.raw),
        best_validation_loss: best,
        event: event.to_string(),
    };
    log.records.push(record(
        0,
        adam.lr,
        None,
        Some(&initial),
        schedule.best(),
        "start",
    ));

    let mut step = 0;
    let mut running = (0.0, 0usize);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for _ in 0..config.max_epochs {
        // Fisher-Yates with the run's generator
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_step(&params, &batch, config.input_noise_std, rng)?;
            step += 1;
            if !loss.is_finite() {
                log.records.push(record(
                    step,
                    adam.lr,
                    Some(loss),
                    None,
                    schedule.best(),
                    "diverged",
                ));
                return Ok(StageResult {
                    params: checkpoint.0,
                    best: f64::NAN,
                    diverged: true,
                });
            }
            adam.update(&mut params, &grads);
            running.0 += loss;
            running.1 += 1;
            if step % config.validation_interval_batches == 0 {
                let train_mean = running.0 / running.1 as f64;
                running = (0.0, 0);
                let val = set_loss(&params, validation_set)?;
                if !val.normalized.is_finite() || !params.is_finite() {
                    log.records.push(record(
                        step,
                        adam.lr,
                        Some(train_mean),
                        Some(&val),
                        schedule.best(),
                        "diverged",
                    ));
                    return Ok(StageResult {
                        params: checkpoint.0,
                        best: f64::NAN,
                        diverged: true,
                    });
                }
                match schedule.observe(val.normalized) {
                    ValidationOutcome::Accept => {
                        checkpoint = (params.clone(), adam.clone());
                        log.records.push(record(
                            step,
                            adam.lr,
                            Some(train_mean),
                            Some(&val),
                            schedule.best(),
                            "validate",
                        ));
                    }
                    ValidationOutcome::Restore => {
                        let lr = adam.lr * 0.5;
                        params = checkpoint.0.clone();
                        adam = checkpoint.1.clone();
                        adam.lr = lr;
                        checkpoint.1.lr = lr;
                        log.records.push(record(
                            step,
                            adam.lr,
                            Some(train_mean),
                            Some(&val),
                            schedule.best(),
                            "restore",
                        ));
                    }
                    ValidationOutcome::Stop => {
                        params = checkpoint.0.clone();
                        log.records.push(record(
                            step,
                            adam.lr,
                            Some(train_mean),
                            Some(&val),
                            schedule.best(),
                            "stop",
                        ));
                        break 'epochs;
                    }
                }
            }
        }
    }
    // a trailing partial interval is validated too, so the returned model is always a checkpoint
    if step % config.validation_interval_batches != 0 && params != checkpoint.0 {
        let val = set_loss(&params, validation_set)?;
        if val.normalized.is_finite()
            && schedule.observe(val.normalized) == ValidationOutcome::Accept
        {
            checkpoint = (params.clone(), adam.clone());
            log.records.push(record(
                step,
                adam.lr,
                None,
                Some(&val),
                schedule.best(),
                "validate",
            ));
        }
    }
    let best = schedule.best().expect("initial validation recorded");
    log.records
        .push(record(step, adam.lr, None, None, Some(best), "end"));
    Ok(StageResult {
        params: checkpoint.0,
        best,
        diverged: false,
    })
}

/// Seed of independent run `run` derived from the base seed.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(run as u64 + 1)
}

/// Trains the embedding network; see the module documentation for the protocol.
pub fn train(
    config: &TrainerConfig,
    train_set: &[TrainingExample],
    validation_set: &[TrainingExample],
    init: Init<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut log = TrainingLog::default();
    let mut best: Option<(NetworkParameters, f64, usize)> = None;
    let segment = config.curriculum_segment_frames;
    let (seg_train, seg_val): (Vec<_>, Vec<_>) = if segment > 0 {
        (
            train_set.iter().flat_map(|e| e.segments(segment)).collect(),
            validation_set
                .iter()
                .flat_map(|e| e.segments(segment))
                .collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    for run in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(config.seed, run));
        let mut params = match &init {
            Init::Random(shape) => NetworkParameters::random(*shape, &mut rng),
            Init::From(p) => (*p).clone(),
        };
        if segment > 0 {
            let r = train_stage(
                config,
                run,
                "curriculum",
                params,
                &seg_train,
                &seg_val,
                &mut rng,
                &mut log,
            )?;
            if r.diverged {
                continue;
            }
            params = r.params;
        }
        let r = train_stage(
            config,
            run,
            "full",
            params,
            train_set,
            validation_set,
            &mut rng,
            &mut log,
        )?;
        if r.diverged {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b, _)| r.best < *b) {
            best = Some((r.params, r.best, run));
        }
    }
    let (params, best_validation_loss, run) =
        best.ok_or_else(|| Error::Numeric("every training run diverged".into()))?;
    log.records.push(LogRecord {
        run,
        stage: "select".into(),
        step: 0,
        learning_rate: config.initial_lr,
        train_loss: None,
        validation_loss: Some(best_validation_loss),
        validation_loss_raw: None,
        best_validation_loss: Some(best_validation_loss),
        event: "selected".into(),
    });
    Ok(TrainOutcome {
        params,
        best_validation_loss,
        run,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_losses_never_restore() {
        let mut s = ValidationSchedule::new(3);
        for l in [5.0, 4.0, 3.0, 2.5, 2.0] {
            assert_eq!(s.observe(l), ValidationOutcome::Accept);
        }
        assert_eq!(s.best(), Some(2.0));
    }

    #[test]
    fn three_consecutive_increases_stop() {
        let mut s = ValidationSchedule::new(3);
        assert_eq!(s.observe(1.0), ValidationOutcome::Accept);
        assert_eq!(s.observe(1.5), ValidationOutcome::Restore);
        assert_eq!(s.observe(1.2), ValidationOutcome::Restore);
        assert_eq!(s.observe(1.1), ValidationOutcome::Stop);
        assert_eq!(s.best(), Some(1.0));
    }

    #[test]
    fn an_improvement_resets_the_count() {
        let mut s = ValidationSchedule::new(3);
        s.observe(1.0);
        assert_eq!(s.observe(2.0), ValidationOutcome::Restore);
        assert_eq!(s.observe(3.0), ValidationOutcome::Restore);
        assert_eq!(s.observe(0.9), ValidationOutcome::Accept);
        assert_eq!(s.observe(2.0), ValidationOutcome::Restore);
        assert_eq!(s.observe(2.0), ValidationOutcome::Restore);
        assert_eq!(s.observe(2.0), ValidationOutcome::Stop);
    }

    #[test]
    fn config_defaults_match_protocol() {
        let c = TrainerConfig::default();
        assert_eq!(c.initial_lr, 1e-3);
        assert_eq!((c.beta1, c.beta2, c.epsilon), (0.9, 0.999, 1e-8));
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.validation_interval_batches, 10);
        assert_eq!(c.patience, 3);
        assert_eq!(c.input_noise_std, 0.6);
        assert_eq!(c.curriculum_segment_frames, 100);
        assert_eq!(c.restarts, 6);
        let bad = TrainerConfig { patience: 0, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        use crate::net::{CellKind, NetworkShape};
        let shape = NetworkShape {
            cell: CellKind::Gru,
            freq_bins: 2,
            ivector_width: 0,
            hidden: 1,
            layers: 1,
            embedding_dim: 1,
        };
        let mut p = NetworkParameters::zeros(shape);
        let mut g = p.zeros_like();
        g.for_each_mut(|s| s.iter_mut().for_each(|v| *v = 3.0));
        let mut adam = Adam::new(&TrainerConfig::default(), &p);
        adam.update(&mut p, &g);
        p.for_each_mut(|s| s.iter().for_each(|v| assert!((v + 1e-3).abs() < 1e-9)));
    }
}
