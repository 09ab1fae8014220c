//! RMSprop training, the learning-rate schedule and multi-step rollout.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{WindowedDataset, ZScoreStats};
use crate::error::{dim_err, input_err, Result, StgcnError};
use crate::evaluation::{metrics, truths};
use crate::layers::StgcnModel;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: usize,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    /// Set from the run manifest's top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
    /// Forecast step (1-based) used as the training target. Step 1 gives
    /// the one-step model used for rollout.
    pub target_step: usize,
    /// Windows per forward pass during validation and evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 50,
            lr0: 1e-3,
            lr_decay: 0.7,
            decay_every_epochs: 5,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-8,
            seed: 0,
            target_step: 1,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(input_err!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(input_err!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(input_err!("batch sizes must be >= 1"));
        }
        if self.decay_every_epochs == 0 {
            return Err(input_err!("decay_every_epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_eps > 0.0) {
            return Err(input_err!("rmsprop_rho must be in [0, 1) and rmsprop_eps positive"));
        }
        if self.target_step == 0 {
            return Err(input_err!("target_step must be >= 1"));
        }
        Ok(())
    }

    /// Step-decay schedule `lr0 · decay^⌊epoch / every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = i32::try_from(epoch / self.decay_every_epochs).unwrap_or(i32::MAX);
        self.lr0 * self.lr_decay.powf(f64::from(k))
    }
}

/// Sum of squared errors over every element.
pub fn l2_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != truth.shape() {
        return Err(dim_err!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        ));
    }
    let e = pred.sub(truth)?;
    Ok(e.mul(&e)?.sum())
}

/// Applies one RMSprop update in place. Coordinates with a zero gradient keep
/// their exact value.
pub fn rmsprop_update<T: Scalar>(theta: &mut [T], accum: &mut [T], grad: &[T], lr: T, rho: T, eps: T) {
    let one = T::one();
    for ((p, s), &g) in theta.iter_mut().zip(accum.iter_mut()).zip(grad) {
        *s = rho * *s + (one - rho) * g * g;
        if g != T::zero() {
            *p -= lr * g / (*s + eps).sqrt();
        }
    }
}

/// RMSprop second-moment state for a fixed parameter list.
#[derive(Debug, Clone)]
pub struct RmsProp<T> {
    pub rho: T,
    pub eps: T,
    accum: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(params: &[(String, Tensor<T>)], rho: T, eps: T) -> Self {
        Self {
            rho,
            eps,
            accum: params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.accum
    }

    /// Updates every parameter from its stored gradient. A missing gradient
    /// counts as zero. Any non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], lr: T) -> Result<()> {
        if params.len() != self.accum.len() {
            return Err(dim_err!("optimizer built for {} tensors, got {}", self.accum.len(), params.len()));
        }
        let grads: Vec<Vec<T>> = params
            .iter()
            .map(|(_, p)| p.grad().unwrap_or_else(|| vec![T::zero(); p.len()]))
            .collect();
        for ((name, p), g) in params.iter().zip(&grads) {
            if g.len() != p.len() {
                return Err(dim_err!("gradient of {name} has {} entries, expected {}", g.len(), p.len()));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(StgcnError::Numeric(format!(
                    "non-finite gradient {} at {name}[{i}]",
                    g[i].as_f64()
                )));
            }
        }
        for (((_, p), g), s) in params.iter().zip(&grads).zip(&mut self.accum) {
            p.update_data(|d| rmsprop_update(d, s, g, lr, self.rho, self.eps))?;
        }
        Ok(())
    }
}

/// Mutable state of a training run between epochs.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub optimizer: RmsProp<T>,
    pub epoch: usize,
    pub lr: f64,
    pub best_val_mae: Option<f64>,
    pub steps: usize,
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-window sum of squared errors, in normalized units.
    pub train_loss: f64,
    /// Validation MAE and RMSE at the target step, in original units.
    pub val_mae: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,lr";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_mae, r.val_rmse, r.lr));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MAE (the last epoch when there
    /// is no validation data).
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

/// Forward, loss and backward on one batch followed by an RMSprop step.
/// Returns the summed loss over the batch.
pub fn train_step<T: Scalar>(
    model: &StgcnModel<T>,
    optimizer: &mut RmsProp<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let params = model.parameters();
    model.zero_grad();
    let pred = model.forward(x)?;
    let loss = l2_loss(&pred, y)?;
    let value = loss.item()?.as_f64();
    if !value.is_finite() {
        return Err(StgcnError::Numeric(format!("non-finite training loss {value}")));
    }
    let batch = x.shape()[0] as f64;
    loss.scale(T::of(1.0 / batch)).backward()?;
    optimizer.step(&params, T::of(lr))?;
    Ok(value)
}

/// Window order for one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Trains `model` in place on `train` and keeps the parameters that score the
/// lowest validation MAE at the target step.
pub fn train<T: Scalar>(
    model: &StgcnModel<T>,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(input_err!("training set is empty"));
    }
    if cfg.target_step > train.horizon {
        return Err(input_err!(
            "target_step {} exceeds the dataset horizon {}",
            cfg.target_step,
            train.horizon
        ));
    }
    let stats = train.stats();
    let snapshot = |epoch: Option<usize>| Checkpoint::from_model(model, Some(stats), cfg.target_step, epoch);
    let params = model.parameters();
    let mut state = TrainState {
        optimizer: RmsProp::new(&params, T::of(cfg.rmsprop_rho), T::of(cfg.rmsprop_eps)),
        epoch: 0,
        lr: cfg.lr_at(0),
        best_val_mae: None,
        steps: 0,
    };
    let mut last_good = snapshot(None);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        state.lr = cfg.lr_at(epoch);
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch::<T>(chunk, cfg.target_step)?;
            match train_step(model, &mut state.optimizer, &x, &y, state.lr) {
                Ok(v) => loss_sum += v,
                Err(StgcnError::Numeric(message)) => {
                    return Err(StgcnError::Diverged {
                        message: format!("epoch {epoch}, step {}: {message}", state.steps),
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            }
            state.steps += 1;
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_mae, val_rmse) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let pred = predict_direct(model, val, cfg.eval_batch_size)?;
            let r = metrics(&pred, &truths(val, cfg.target_step), cfg.target_step, 1)?;
            (r.mae, r.rmse)
        };
        let record = EpochRecord { epoch, train_loss, val_mae, val_rmse, lr: state.lr };
        log::info!(
            "epoch {epoch}: train_loss={train_loss:.6} val_mae={val_mae:.4} val_rmse={val_rmse:.4} lr={:.3e}",
            state.lr
        );
        history.push(record);
        if !train_loss.is_finite() || !(val.is_empty() || val_mae.is_finite()) {
            return Err(StgcnError::Diverged {
                message: format!("epoch {epoch} ended with train_loss={train_loss} val_mae={val_mae}"),
                last_good: Box::new(last_good),
            });
        }
        last_good = snapshot(Some(epoch));
        let improved = val.is_empty() || state.best_val_mae.is_none_or(|b| val_mae < b);
        if improved {
            state.best_val_mae = Some(val_mae).filter(|v| v.is_finite());
            best = Some(last_good.clone());
        }
    }
    Ok(TrainOutcome {
        best: best.unwrap_or(last_good),
        history,
        steps: state.steps,
    })
}

fn denormalize_into<T: Scalar>(out: &mut Vec<f64>, y: &Tensor<T>, stats: &ZScoreStats) {
    out.extend(y.data().iter().map(|v| stats.denormalize(v.as_f64())));
}

/// One forward pass per window, denormalized, flattened `windows × n`.
pub fn predict_direct<T: Scalar>(model: &StgcnModel<T>, dataset: &WindowedDataset, batch: usize) -> Result<Vec<f64>> {
    let stats = dataset.stats();
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len() * dataset.n());
    no_grad(|| {
        for chunk in idx.chunks(batch.max(1)) {
            let (x, _) = dataset.batch::<T>(chunk, 1)?;
            denormalize_into(&mut out, &model.forward(&x)?, &stats);
        }
        Ok(out)
    })
}

/// Feeds each one-step prediction back as the newest frame. `x` is a
/// normalized `[B, M, n, 1]` batch; returns the `H` normalized outputs.
fn rollout_tensor<T: Scalar>(model: &StgcnModel<T>, x: &Tensor<T>, horizon: usize) -> Result<Vec<Tensor<T>>> {
    let s = x.shape().to_vec();
    let (b, m, n) = (s[0], s[1], s[2]);
    let mut window = x.clone();
    let mut outputs = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let y = model.forward(&window)?;
        if step + 1 < horizon {
            let frame = y.reshape(&[b, 1, n, 1])?;
            window = Tensor::concat(&[window.narrow(1, 1, m - 1)?, frame], 1)?;
        }
        outputs.push(y);
    }
    Ok(outputs)
}

/// Iterated forecast from one raw `M × n` history; returns `H × n` in the
/// original units.
pub fn rollout_predict<T: Scalar>(
    model: &StgcnModel<T>,
    history: &[f64],
    horizon: usize,
    stats: &ZScoreStats,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(input_err!("rollout horizon must be >= 1"));
    }
    let (m, n) = (model.config().history, model.config().nodes);
    if history.len() != m * n {
        return Err(dim_err!("history has {} values, expected M × n = {}", history.len(), m * n));
    }
    let x = Tensor::new(&[1, m, n, 1], history.iter().map(|&v| T::of(stats.normalize(v))).collect())?;
    no_grad(|| {
        let mut out = Vec::with_capacity(horizon * n);
        for y in rollout_tensor(model, &x, horizon)? {
            denormalize_into(&mut out, &y, stats);
        }
        Ok(out)
    })
}

/// Rollout over every window of `dataset`. Entry `h - 1` of the result holds
/// the step-`h` forecasts flattened `windows × n`, in original units.
pub fn rollout_dataset<T: Scalar>(
    model: &StgcnModel<T>,
    dataset: &WindowedDataset,
    horizon: usize,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 {
        return Err(input_err!("rollout horizon must be >= 1"));
    }
    let stats = dataset.stats();
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = vec![Vec::with_capacity(dataset.len() * dataset.n()); horizon];
    no_grad(|| {
        for chunk in idx.chunks(batch.max(1)) {
            let (x, _) = dataset.batch::<T>(chunk, 1)?;
            for (h, y) in rollout_tensor(model, &x, horizon)?.iter().enumerate() {
                denormalize_into(&mut out[h], y, &stats);
            }
        }
        Ok(out)
    })
}
