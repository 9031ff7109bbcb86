//! End-to-end optimization of the hybrid model: binary cross-entropy,
//! SGD with classical momentum, early stopping and checkpoints.

mod checkpoint;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, MetricsLog};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, CutoutMode};
use crate::datapipe::{make_batches, BatchMode, FrameSource};
use crate::error::{dim_err, Error, Result};
use crate::model::{Forward, HybridModel, ParamStore};
use crate::numerics::{bce_term, NormMode, Real, Tensor, BATCH_NORM_MOMENTUM};

/// Probability at or above which a frame is called fake.
pub const DECISION_THRESHOLD: f64 = 0.5;

fn default_lr() -> f64 {
    3e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    16
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    3
}
fn default_train_acc_stop() -> f64 {
    0.995
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Constant momentum; values in `[0.6, 0.9]` are the usual choice.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Consecutive epoch-over-epoch validation-loss increases that stop training.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Training accuracy at which training stops.
    #[serde(default = "default_train_acc_stop")]
    pub train_acc_stop: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cutout: CutoutMode,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            train_acc_stop: default_train_acc_stop(),
            seed: 0,
            cutout: CutoutMode::None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be at least 1".into()));
        }
        if !(self.train_acc_stop > 0.0 && self.train_acc_stop <= 1.0) {
            return Err(Error::Config(format!("train_acc_stop must lie in (0, 1], got {}", self.train_acc_stop)));
        }
        self.augment.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Validation loss rose on each of the last `patience` epochs.
    ValLossRising,
    /// Training accuracy reached the threshold.
    TrainAccuracy,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop(StopReason),
}

/// Stopping rule after an epoch. The training-accuracy rule is checked first.
pub fn early_stop_check(val_losses: &[f64], train_acc: f64, cfg: &TrainConfig) -> Decision {
    if train_acc >= cfg.train_acc_stop {
        return Decision::Stop(StopReason::TrainAccuracy);
    }
    let k = cfg.patience;
    if val_losses.len() > k && val_losses[val_losses.len() - k - 1..].windows(2).all(|w| w[1] > w[0]) {
        return Decision::Stop(StopReason::ValLossRising);
    }
    Decision::Continue
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(dim_err!("bce_loss: {} probabilities for {} targets", p.len(), y.len()));
    }
    Ok(p.iter().zip(y).map(|(&pi, &yi)| bce_term(pi, yi)).sum::<f64>() / p.len() as f64)
}

/// `v <- momentum * v + g; w <- w - lr * v` for every parameter in store order.
pub fn sgd_momentum_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    velocities: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocities.len() != params.len() {
        return Err(dim_err!(
            "sgd step: {} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocities.len()
        ));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for ((name, g), v) in names.iter().zip(grads).zip(velocities.iter()) {
        let w = params.get(name).expect("name from store");
        if g.shape() != w.shape() || v.shape() != w.shape() {
            return Err(dim_err!(
                "sgd step: '{name}' has shape {:?}, gradient {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            ));
        }
    }
    let (lr, m) = (T::of(lr), T::of(momentum));
    for ((name, g), v) in names.iter().zip(grads).zip(velocities.iter_mut()) {
        let w = params.get_mut(name).expect("name from store");
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = m * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Optimizer state that survives between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Real> {
    /// Completed epochs.
    pub epoch: usize,
    /// One buffer per parameter, in store order.
    pub velocities: Vec<Tensor<T>>,
    pub history: Vec<EpochMetrics>,
    /// Run seed; together with `epoch` it fixes every later draw.
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub stop_reason: Option<StopReason>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: &ParamStore<T>, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            velocities: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            history: Vec::new(),
            seed,
            best_epoch: None,
            stop_reason: None,
        }
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.history.iter().map(|m| m.val_loss).collect()
    }
}

/// Result of [`fit`]: the final optimizer state and the parameters of the
/// epoch with the lowest validation loss.
#[derive(Clone, Debug)]
pub struct FitOutcome<T: Real> {
    pub state: TrainState<T>,
    pub best: ParamStore<T>,
}

fn correct(p: f64, y: f64) -> bool {
    (p >= DECISION_THRESHOLD) == (y >= 0.5)
}

/// Loss and accuracy of the model on `source` without augmentation.
pub fn evaluate_loss<T: Real, S: FrameSource + ?Sized>(
    model: &HybridModel<T>,
    source: &S,
    batch_size: usize,
    augment: &AugmentConfig,
) -> Result<(f64, f64)> {
    if source.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut batches = make_batches(source, batch_size, 0, 0, BatchMode::Eval, augment)?;
    let (mut loss, mut hits, mut n) = (0.0, 0usize, 0usize);
    while let Some(batch) = batches.next_batch::<T>() {
        let batch = batch?;
        let probs = model.predict(&batch.inputs)?;
        let ys: Vec<f64> = batch.targets.data().iter().map(|v| v.as_f64()).collect();
        loss += bce_loss(&probs, &ys)? * ys.len() as f64;
        hits += probs.iter().zip(&ys).filter(|(&p, &y)| correct(p, y)).count();
        n += ys.len();
    }
    Ok((loss / n as f64, hits as f64 / n as f64))
}

/// One pass over the shuffled training set; returns mean loss and accuracy.
fn train_epoch<T: Real, S: FrameSource + ?Sized>(
    model: &mut HybridModel<T>,
    state: &mut TrainState<T>,
    train: &S,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut batches = make_batches(
        train,
        cfg.batch_size,
        state.seed,
        state.epoch as u64,
        BatchMode::Train(cfg.cutout),
        &cfg.augment,
    )?;
    let (mut loss_sum, mut hits, mut n) = (0.0, 0usize, 0usize);
    let mut step = 0;
    while let Some(batch) = batches.next_batch::<T>() {
        let batch = batch?;
        let (loss, probs, grads, stats) = {
            let mut fw = Forward::new(&model.params, NormMode::Train, true);
            let x = fw.input(batch.inputs);
            let p = model.forward(&mut fw, x)?;
            let loss = fw.graph.bce(p, batch.targets.data())?;
            let loss_value = fw.graph.value(loss).item()?.as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { loss: loss_value, epoch: state.epoch, step });
            }
            fw.graph.backward(loss)?;
            let probs: Vec<f64> = fw.graph.value(p).data().iter().map(|v| v.as_f64()).collect();
            (loss_value, probs, fw.gradients(), fw.take_batch_stats())
        };
        model.params.update_running(&stats, BATCH_NORM_MOMENTUM)?;
        sgd_momentum_step(&mut model.params, &grads, &mut state.velocities, cfg.lr, cfg.momentum)?;
        let ys = batch.targets.data();
        loss_sum += loss * ys.len() as f64;
        hits += probs.iter().zip(ys).filter(|(&p, y)| correct(p, y.as_f64())).count();
        n += ys.len();
        step += 1;
    }
    Ok((loss_sum / n as f64, hits as f64 / n as f64))
}

/// Trains until [`early_stop_check`] fires or `max_epochs` is reached. On
/// return `model` holds the parameters of the best validation epoch.
/// `on_epoch` sees every metrics record as soon as it exists.
pub fn fit<T: Real, S: FrameSource + ?Sized, V: FrameSource + ?Sized>(
    model: &mut HybridModel<T>,
    train: &S,
    val: &V,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut state = TrainState::new(&model.params, cfg.seed);
    let mut best = model.params.clone();
    let mut best_loss = f64::INFINITY;
    while state.epoch < cfg.max_epochs {
        let started = Instant::now();
        let (train_loss, train_acc) = train_epoch(model, &mut state, train, cfg)?;
        let (val_loss, val_acc) = evaluate_loss(model, val, cfg.batch_size, &cfg.augment)?;
        state.epoch += 1;
        let m = EpochMetrics { epoch: state.epoch, train_loss, train_acc, val_loss, val_acc };
        log::info!(
            "epoch {} train_loss {:.5} train_acc {:.4} val_loss {:.5} val_acc {:.4} ({:.1}s)",
            m.epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            started.elapsed().as_secs_f64()
        );
        on_epoch(&m)?;
        state.history.push(m);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.params.clone();
            state.best_epoch = Some(state.epoch);
        }
        if let Decision::Stop(reason) = early_stop_check(&state.val_losses(), train_acc, cfg) {
            state.stop_reason = Some(reason);
            break;
        }
    }
    if state.stop_reason.is_none() {
        state.stop_reason = Some(StopReason::MaxEpochs);
    }
    model.params = best.clone();
    Ok(FitOutcome { state, best })
}
