//! Mini-batch fine-tuning, best-epoch selection, and central-window evaluation.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    augment, build_sample, central_window, extract_windows, DataError, GridSample, ScanRecord,
};
use crate::evaluation::{compute_metrics, EvalError, MetricSet};
use crate::model::{
    forward_batch, forward_classify, register_params, ModelConfig, ModelError, ModelParams,
};
use crate::numerics::{adam_step, AdamConfig, AdamState, DualValue, NumericsError, Tape, Tensor};
use crate::seed::{hash_str, rng_for, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (cases: {})", cases.join(", "))]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        cases: Vec<String>,
    },
}

/// Criterion for choosing the returned weights among epochs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Accuracy,
    MacroRecall,
    /// Lowest mean inner-validation cross-entropy.
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Share of each class held out from the training cases for epoch selection.
    pub inner_val_fraction: f64,
    pub stride: usize,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            augment: true,
            inner_val_fraction: 0.2,
            stride: 1,
            selection: Selection::Accuracy,
        }
    }
}

impl TrainConfig {
    /// The full-length recipe: 3000 epochs at batch size 8 and lr 0.003.
    pub fn full_length() -> Self {
        Self {
            epochs: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.stride == 0 {
            return err("stride must be at least 1".into());
        }
        if !(0.0..=0.5).contains(&self.inner_val_fraction) {
            return err(format!(
                "inner_val_fraction {} outside [0, 0.5]",
                self.inner_val_fraction
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return err(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Parameters plus optimizer state for one training run.
pub struct Trainer {
    cfg: ModelConfig,
    params: ModelParams<f32>,
    duals: Vec<DualValue<f32>>,
    adam: AdamState<f32>,
}

impl Trainer {
    pub fn new(
        cfg: ModelConfig,
        params: ModelParams<f32>,
        adam: AdamConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let duals = params.to_duals();
        let adam = AdamState::new(adam, &duals)?;
        Ok(Self {
            cfg,
            params,
            duals,
            adam,
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Mean cross-entropy of the batch and its gradient for every parameter,
    /// in canonical order.
    pub fn loss_and_grads(
        &self,
        batch: &[&GridSample],
    ) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
        let (loss, grads) = self.loss_and_grads_inner(batch)?;
        Ok((loss, grads))
    }

    fn loss_and_grads_inner(
        &self,
        batch: &[&GridSample],
    ) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &self.params, &self.cfg, true)?;
        let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let trace = forward_batch(&mut tape, &vars, &self.cfg, &images)?;
        let loss_var = tape.cross_entropy(trace.logits, &labels)?;
        let loss = f64::from(tape.value(loss_var).item()?);
        if !loss.is_finite() {
            return Ok((loss, Vec::new()));
        }
        let mut grads = tape.backward(loss_var)?;
        Ok((
            loss,
            vars.all.iter().map(|&v| grads.take_or_zeros(v)).collect(),
        ))
    }

    /// One forward, backward, and Adam update. Returns the loss before the update.
    pub fn train_step(
        &mut self,
        batch: &[&GridSample],
        epoch: usize,
        batch_index: usize,
    ) -> Result<f64, TrainError> {
        let (loss, grads) = self.loss_and_grads_inner(batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                loss,
                epoch,
                batch: batch_index,
                cases: batch
                    .iter()
                    .map(|s| format!("{}@{}", s.case_id, s.window_start))
                    .collect(),
            });
        }
        for (d, g) in self.duals.iter_mut().zip(grads) {
            d.grad = g;
        }
        adam_step(&mut self.duals, &mut self.adam)?;
        self.params.load_duals(&self.duals);
        Ok(loss)
    }
}

/// Statistics for one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    /// Selection value; higher is better.
    pub val_metric: Option<f64>,
    pub steps: usize,
    /// Not exported, so logs stay byte-identical across runs.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    record: &'a EpochRecord,
    selected: bool,
}

impl TrainLog {
    /// One JSON object per epoch; the selected epoch carries `"selected": true`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            let line = LogLine {
                record: r,
                selected: r.epoch == self.best_epoch,
            };
            out.push_str(&serde_json::to_string(&line).expect("log serializes"));
            out.push('\n');
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }
}

pub struct FitOutcome {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
}

/// Every `(case, window start)` pair used for training.
pub fn training_windows(
    records: &[ScanRecord],
    k: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>, TrainError> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for s in extract_windows(r.depth(), k, stride)? {
            out.push((i, s));
        }
    }
    Ok(out)
}

pub fn fit(
    train: &[ScanRecord],
    val: &[ScanRecord],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<ModelParams<f32>>,
) -> Result<FitOutcome, TrainError> {
    fit_with_progress(train, val, cfg, tcfg, init, &mut |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with_progress(
    train: &[ScanRecord],
    val: &[ScanRecord],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<ModelParams<f32>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome, TrainError> {
    tcfg.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let train_ids: HashSet<&str> = train.iter().map(|r| r.case_id.as_str()).collect();
    if let Some(r) = val.iter().find(|r| train_ids.contains(r.case_id.as_str())) {
        return Err(TrainError::Config(format!(
            "case `{}` is in both the training and validation sets",
            r.case_id
        )));
    }
    let params = match init {
        Some(p) => p,
        None => ModelParams::init(cfg, tcfg.seed)?,
    };
    let mut trainer = Trainer::new(cfg.clone(), params, tcfg.adam())?;
    let windows = training_windows(train, cfg.k, tcfg.stride)?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        let mut order = windows.clone();
        order.shuffle(&mut rng_for(tcfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&(i, s)| {
                    let sample = build_sample(&train[i], s, cfg.k, cfg.fusion)?;
                    Ok(if tcfg.augment {
                        let mut rng = rng_for(
                            tcfg.seed,
                            &[
                                stream::AUGMENT,
                                epoch as u64,
                                hash_str(&sample.case_id),
                                s as u64,
                            ],
                        );
                        augment(&sample, &mut rng)
                    } else {
                        sample
                    })
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            let refs: Vec<&GridSample> = samples.iter().collect();
            loss_sum += trainer.train_step(&refs, epoch, b)? * refs.len() as f64;
            steps += 1;
        }
        let (val_accuracy, val_loss, val_metric) = if val.is_empty() {
            (None, None, None)
        } else {
            let ev = evaluate(trainer.params(), cfg, val)?;
            let loss = ev.mean_loss();
            match (ev.metrics, loss) {
                (Some(m), Some(l)) => (
                    Some(m.accuracy),
                    Some(l),
                    Some(selection_value(&m, l, tcfg.selection)),
                ),
                _ => (None, None, None),
            }
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / windows.len() as f64,
            val_accuracy,
            val_loss,
            val_metric,
            steps,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        match val_metric {
            Some(v) if best.as_ref().is_none_or(|(b, _)| v > *b) => {
                best = Some((v, trainer.params().clone()));
                log.best_epoch = epoch;
            }
            _ => {}
        }
        on_epoch(&record);
        log.epochs.push(record);
    }
    let params = match best {
        Some((_, p)) => p,
        None => {
            log.best_epoch = tcfg.epochs - 1;
            trainer.into_params()
        }
    };
    Ok(FitOutcome { params, log })
}

fn selection_value(m: &MetricSet, loss: f64, s: Selection) -> f64 {
    match s {
        Selection::Accuracy => m.accuracy,
        Selection::MacroRecall => m.recall,
        Selection::Loss => -loss,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub case_id: String,
    pub label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<CasePrediction>,
    /// Cases excluded from the metrics.
    pub failures: Vec<CaseFailure>,
    /// `None` when every case failed.
    pub metrics: Option<MetricSet>,
}

impl Evaluation {
    /// Mean cross-entropy of the scored cases.
    pub fn mean_loss(&self) -> Option<f64> {
        if self.predictions.is_empty() {
            return None;
        }
        let total: f64 = self
            .predictions
            .iter()
            .map(|p| {
                let m = p.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + p.scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
                lse - p.scores[p.label]
            })
            .sum();
        Some(total / self.predictions.len() as f64)
    }
}

/// Predicts each case from its central window, without augmentation.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    cases: &[ScanRecord],
) -> Result<Evaluation, TrainError> {
    cfg.validate()?;
    let results: Vec<Result<CasePrediction, CaseFailure>> = cases
        .par_iter()
        .map(|r| {
            let fail = |e: String| CaseFailure {
                case_id: r.case_id.clone(),
                error: e,
            };
            let start = central_window(r.depth(), cfg.k).map_err(|e| fail(e.to_string()))?;
            let sample =
                build_sample(r, start, cfg.k, cfg.fusion).map_err(|e| fail(e.to_string()))?;
            let out = forward_classify(&sample.image, params, cfg, false)
                .map_err(|e| fail(e.to_string()))?;
            Ok(CasePrediction {
                case_id: r.case_id.clone(),
                label: r.label,
                predicted: out.logits.argmax(),
                scores: out.logits.scores,
            })
        })
        .collect();
    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(p) => predictions.push(p),
            Err(f) => failures.push(f),
        }
    }
    let metrics = if predictions.is_empty() {
        None
    } else {
        let p: Vec<usize> = predictions.iter().map(|c| c.predicted).collect();
        let l: Vec<usize> = predictions.iter().map(|c| c.label).collect();
        Some(compute_metrics(&p, &l)?)
    };
    Ok(Evaluation {
        predictions,
        failures,
        metrics,
    })
}
