//! Loss, optimizer, learning-rate schedule and the epoch loop.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::datagen::{Sample, SampleStream};
use crate::error::{Error, Result};
use crate::metrics::{self, Prf};
use crate::network::SpanModel;
use crate::numerics::{ops, FeatureMap, ParamStore};

/// Mean binary cross-entropy between a soft mask and a binary ground truth.
/// Predictions are clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(pred: &FeatureMap, mask: &FeatureMap) -> Result<f64> {
    ops::bce(pred, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub initial_lr: f64,
    pub lr_floor: f64,
    /// Epochs without a new best validation loss before each halving.
    pub lr_patience: usize,
    /// Epochs without a new best validation loss before stopping.
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps_per_epoch: 100,
            initial_lr: 1e-4,
            lr_floor: 1e-7,
            lr_patience: 10,
            stop_patience: 30,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument("batch_size, steps_per_epoch and max_epochs must be positive".into()));
        }
        if !(self.initial_lr > self.lr_floor && self.lr_floor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need initial_lr > lr_floor > 0, got {} and {}",
                self.initial_lr, self.lr_floor
            )));
        }
        if self.lr_patience == 0 || self.stop_patience < self.lr_patience {
            return Err(Error::InvalidArgument(format!(
                "need stop_patience >= lr_patience > 0, got {} and {}",
                self.stop_patience, self.lr_patience
            )));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for every tensor in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            first: store.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: store.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

/// One bias-corrected Adam update from the gradients stored in `store`.
/// Frozen tensors are skipped.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params", store.len()),
            format!("{} moment tensors", state.first.len()),
        ));
    }
    if let Some(p) = store.iter().find(|p| p.grad().iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite { what: "gradient", detail: format!("parameter `{}`", p.name()) });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        if !p.is_trainable() {
            continue;
        }
        let grad = p.grad().to_vec();
        for (((w, g), m), v) in p.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// What the schedule decided after one epoch's validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Plateau,
    Halved,
    Stop,
}

/// Best-so-far plateau rule: every `lr_patience` epochs without a strictly lower
/// validation loss halve the rate (never below the floor); `stop_patience` such
/// epochs end training.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    floor: f64,
    lr_patience: usize,
    stop_patience: usize,
    best: f64,
    since_best: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.initial_lr,
            floor: cfg.lr_floor,
            lr_patience: cfg.lr_patience,
            stop_patience: cfg.stop_patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleEvent {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            return ScheduleEvent::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.stop_patience {
            ScheduleEvent::Stop
        } else if self.since_best.is_multiple_of(self.lr_patience) {
            self.lr = (self.lr * 0.5).max(self.floor);
            ScheduleEvent::Halved
        } else {
            ScheduleEvent::Plateau
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: Prf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    pub metrics: EpochMetrics,
}

/// Per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "# epoch lr train_loss val_loss val_precision val_recall val_f1";

impl History {
    /// One whitespace-separated line per epoch after a `#` header; floats use
    /// the shortest representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let m = &r.metrics;
            writeln!(
                s,
                "{} {:e} {:e} {:e} {:e} {:e} {:e}",
                r.epoch, r.lr, m.train_loss, m.val_loss, m.val.precision, m.val.recall, m.val.f1
            )
            .expect("write to string");
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.metrics.val_loss <= r.metrics.val_loss => Some(b),
            _ => Some(r),
        })
    }
}

/// Work done by [`fit_with`] for each epoch.
pub trait EpochRunner {
    fn run_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochMetrics>;

    /// Called after an epoch that set a new best validation loss.
    fn on_improvement(&mut self, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

/// Drives `runner` under the plateau schedule until early stop or `max_epochs`.
pub fn fit_with<R: EpochRunner>(runner: &mut R, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let mut schedule = LrSchedule::new(cfg);
    let mut history = History::default();
    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr();
        let metrics = runner.run_epoch(epoch, lr)?;
        if !metrics.val_loss.is_finite() || !metrics.train_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                detail: format!("epoch {epoch}: train {} validation {}", metrics.train_loss, metrics.val_loss),
            });
        }
        history.records.push(EpochRecord { epoch, lr, metrics });
        match schedule.observe(metrics.val_loss) {
            ScheduleEvent::Improved => runner.on_improvement(epoch)?,
            ScheduleEvent::Stop => break,
            ScheduleEvent::Halved | ScheduleEvent::Plateau => {}
        }
    }
    Ok(history)
}

/// Validation threshold used for the per-epoch precision/recall/F1.
pub const VAL_THRESHOLD: f64 = 0.5;

/// Loss and pooled P/R/F1 of `model` over `samples`.
pub fn validate(model: &SpanModel, samples: &[Sample]) -> Result<(f64, Prf)> {
    if samples.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let preds = samples.par_iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        loss += bce_loss(p, &s.mask)?;
    }
    let masks: Vec<&FeatureMap> = samples.iter().map(|s| &s.mask).collect();
    let preds_ref: Vec<&FeatureMap> = preds.iter().collect();
    let prf = metrics::prf1(&preds_ref, &masks, VAL_THRESHOLD)?;
    Ok((loss / samples.len() as f64, prf))
}

/// Mini-batch trainer over a synthetic stream with a fixed validation set.
pub struct Trainer<'a> {
    pub model: SpanModel,
    pub best: SpanModel,
    optimizer: OptimizerState,
    stream: SampleStream,
    val: &'a [Sample],
    cfg: TrainConfig,
    /// Mean batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: SpanModel, stream: SampleStream, val: &'a [Sample], cfg: TrainConfig) -> Self {
        let optimizer = OptimizerState::new(model.store());
        Self { best: model.clone(), model, optimizer, stream, val, cfg, step_losses: Vec::new() }
    }

    /// One optimizer step on the next batch; returns the mean batch loss.
    pub fn step(&mut self, lr: f64) -> Result<f64> {
        let batch = self.stream.next_batch(self.cfg.batch_size);
        let model = &self.model;
        let results = batch.par_iter().map(|s| model.loss_and_grads(&s.image, &s.mask)).collect::<Result<Vec<_>>>()?;
        let mut iter = results.into_iter();
        let (mut loss, mut grads) = iter.next().ok_or(Error::Empty("batch"))?;
        for (l, g) in iter {
            loss += l;
            grads.add_assign(&g);
        }
        let n = batch.len() as f64;
        loss /= n;
        grads.scale(1.0 / n);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                detail: format!("training step {}", self.optimizer.step() + 1),
            });
        }
        let store = self.model.store_mut();
        store.zero_grads();
        store.accumulate(&grads)?;
        adam_step(store, &mut self.optimizer, lr)?;
        self.model.project_constraints();
        self.step_losses.push(loss);
        Ok(loss)
    }
}

impl EpochRunner for Trainer<'_> {
    fn run_epoch(&mut self, _epoch: usize, lr: f64) -> Result<EpochMetrics> {
        let mut total = 0.0;
        for _ in 0..self.cfg.steps_per_epoch {
            total += self.step(lr)?;
        }
        let (val_loss, val) = validate(&self.model, self.val)?;
        Ok(EpochMetrics { train_loss: total / self.cfg.steps_per_epoch as f64, val_loss, val })
    }

    fn on_improvement(&mut self, _epoch: usize) -> Result<()> {
        self.best = self.model.clone();
        Ok(())
    }
}

/// Outcome of [`fit`].
pub struct FitResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: SpanModel,
    /// Parameters after the last epoch.
    pub last: SpanModel,
    pub history: History,
    pub step_losses: Vec<f64>,
}

/// Trains `model` on `train`, selecting the checkpoint with minimal validation loss on `val`.
pub fn fit(model: SpanModel, train: SampleStream, val: &[Sample], cfg: &TrainConfig) -> Result<FitResult> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut trainer = Trainer::new(model, train, val, cfg.clone());
    let history = fit_with(&mut trainer, cfg)?;
    Ok(FitResult { best: trainer.best, last: trainer.model, history, step_losses: trainer.step_losses })
}
