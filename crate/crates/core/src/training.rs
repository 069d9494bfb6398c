//! Supervised training: L1 loss, Adam, step-wise learning-rate decay and
//! early stopping on the validation loss.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward, forward, init_weights, BnMode, Scalar, Tensor, UNetConfig, WeightSet};
use crate::sampling::{augment, AugmentationSpec, Sample, TrainingSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of through the
    /// gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub lr_drop_factor: f64,
    pub lr_drop_epochs: usize,
    pub patience_epochs: usize,
    /// Smallest relative drop of the best validation loss that counts as
    /// progress for early stopping.
    pub min_rel_improvement: f64,
    pub max_epochs: usize,
    /// Samples drawn per epoch; `None` makes one pass over the training set.
    pub samples_per_epoch: Option<usize>,
    pub augment: bool,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            decoupled_weight_decay: false,
            batch_size: 20,
            lr_drop_factor: 10.0,
            lr_drop_epochs: 200,
            patience_epochs: 100,
            min_rel_improvement: 1e-3,
            max_epochs: 400,
            samples_per_epoch: None,
            augment: true,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for training on several stereo pairs: faster decay.
    pub fn multi_pair() -> Self {
        TrainConfig { lr_drop_epochs: 50, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("epsilon", self.epsilon),
            ("lr_drop_factor", self.lr_drop_factor),
            ("bn_momentum", self.bn_momentum),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.min_rel_improvement >= 0.0) {
            return Err(Error::Config("weight_decay and min_rel_improvement must be non-negative".into()));
        }
        if self.batch_size == 0 || self.lr_drop_epochs == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, lr_drop_epochs and max_epochs must be at least 1".into()));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::Config("samples_per_epoch must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.lr_drop_epochs;
        self.lr / self.lr_drop_factor.powi(drops as i32)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean absolute difference over pixels where `valid` is true.
pub fn l1_loss(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::Loss(format!(
            "shape mismatch: {} predictions, {} targets, {} mask entries",
            pred.len(),
            target.len(),
            valid.len()
        )));
    }
    let (sum, n) = pred
        .iter()
        .zip(target)
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t).abs(), n + 1));
    if n == 0 {
        return Err(Error::Loss("no valid pixel".into()));
    }
    Ok(sum / n as f64)
}

/// L1 loss of a batch and its gradient with respect to `pred`.
pub fn l1_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, valid: &[bool]) -> Result<(f64, Tensor<T>)> {
    if !pred.same_shape(target) || valid.len() != pred.data.len() {
        return Err(Error::Loss("prediction, target and mask shapes differ".into()));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Loss("no valid pixel".into()));
    }
    let inv = T::from_f64(1.0 / n as f64);
    let mut grad = pred.zeros_like();
    let mut sum = 0.0;
    for (((g, &p), &t), &ok) in grad.data.iter_mut().zip(&pred.data).zip(&target.data).zip(valid) {
        if ok {
            let d = p - t;
            sum += d.to_f64().abs();
            *g = if d > T::ZERO {
                inv
            } else if d < T::ZERO {
                -inv
            } else {
                T::ZERO
            };
        }
    }
    Ok((sum / n as f64, grad))
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::ZERO; len], v: vec![T::ZERO; len], step: 0 }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension {
            layer: "optimizer".into(),
            msg: format!(
                "{} parameters, {} gradients, state of {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at parameter {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let wd = cfg.weight_decay;
    for i in 0..params.len() {
        let p = params[i].to_f64();
        let mut g = grads[i].to_f64();
        if !cfg.decoupled_weight_decay {
            g += wd * p;
        }
        let m = b1 * state.m[i].to_f64() + (1.0 - b1) * g;
        let v = b2 * state.v[i].to_f64() + (1.0 - b2) * g * g;
        state.m[i] = T::from_f64(m);
        state.v[i] = T::from_f64(v);
        let mut next = p - lr * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
        if cfg.decoupled_weight_decay {
            next -= lr * wd * p;
        }
        params[i] = T::from_f64(next);
    }
    Ok(())
}

/// Stacks samples into network input, target and loss mask.
pub fn assemble_batch(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<bool>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let size = first.size();
    let plane = size * size;
    let channels = 1 + first.orthos.len();
    let n = samples.len();
    let mut input = Tensor::zeros(channels, n, size, size);
    let mut target = Tensor::zeros(1, n, size, size);
    let mut valid = Vec::with_capacity(n * plane);
    for (i, s) in samples.iter().enumerate() {
        if s.size() != size || s.orthos.len() + 1 != channels {
            return Err(Error::Dimension {
                layer: "batch".into(),
                msg: "samples differ in size or channel count".into(),
            });
        }
        input.sample_plane_mut(0, i).copy_from_slice(&s.initial);
        for (k, o) in s.orthos.iter().enumerate() {
            input.sample_plane_mut(k + 1, i).copy_from_slice(o);
        }
        target.sample_plane_mut(0, i).copy_from_slice(&s.gt);
        valid.extend(s.mask.iter().map(|&excluded| !excluded));
    }
    Ok((input, target, valid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    /// A non-finite loss or gradient halted training.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub best: WeightSet<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Optimizer state after the last completed epoch.
    pub adam: AdamState<f32>,
}

/// Mean L1 loss over all valid validation pixels, batch norm in inference
/// mode and no augmentation.
pub fn validation_loss(weights: &WeightSet<f32>, set: &TrainingSet, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| set.get(i)).collect::<Result<Vec<_>>>()?;
        let (x, y, valid) = assemble_batch(&samples)?;
        let out = forward(weights, &x, BnMode::Eval)?;
        for ((&p, &t), &ok) in out.refined.data.iter().zip(&y.data).zip(&valid) {
            if ok {
                sum += (p as f64 - t as f64).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Loss("validation set has no valid pixel".into()));
    }
    Ok(sum / count as f64)
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(model: &UNetConfig, train_set: &TrainingSet, val_set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let weights = init_weights::<f32>(model, cfg.seed)?;
    train_from(weights, train_set, val_set, cfg)
}

/// Trains starting from `weights`.
pub fn train_from(
    mut weights: WeightSet<f32>,
    train_set: &TrainingSet,
    val_set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput("training and validation sets must be nonempty".into()));
    }
    let channels = weights.config().input_channels;
    if train_set.variant.input_channels() != channels || val_set.variant.input_channels() != channels {
        return Err(Error::Config(format!(
            "datasets built for variant {} / {} do not match a {channels}-channel model",
            train_set.variant, val_set.variant
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_696e));
    let mut adam = AdamState::new(weights.params().len());
    let mut history = Vec::new();
    let mut best = weights.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    // best loss at the last epoch that improved it significantly
    let mut anchor_val = f64::INFINITY;
    let mut anchor_epoch = 0;
    let mut stop = StopReason::MaxEpochs;
    let allow_swap = channels == 3;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(train_set.len(), cfg.samples_per_epoch, &mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train_set.get(i)?;
                samples.push(if cfg.augment {
                    augment(&s, &AugmentationSpec::random(&mut rng, allow_swap))?
                } else {
                    s
                });
            }
            let (x, y, valid) = assemble_batch(&samples)?;
            if !valid.iter().any(|&v| v) {
                continue;
            }
            let pass = forward(&weights, &x, BnMode::Train)?;
            let (loss, grad) = l1_loss_grad(&pass.refined, &y, &valid)?;
            if !loss.is_finite() {
                warn!("epoch {epoch}: non-finite training loss, stopping");
                stop = StopReason::Diverged;
                break 'epochs;
            }
            let grads = backward(&weights, &pass, &grad)?;
            if let Err(e) = adam_step(weights.params_mut(), &grads.params, &mut adam, cfg, lr) {
                warn!("epoch {epoch}: {e}, stopping");
                stop = StopReason::Diverged;
                break 'epochs;
            }
            weights.update_running_stats(&pass, cfg.bn_momentum);
            loss_sum += loss * chunk.len() as f64;
            loss_n += chunk.len();
        }
        let train_loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN };
        let val_loss = validation_loss(&weights, val_set, cfg.batch_size)?;
        history.push(EpochRecord { epoch, train_loss, val_loss, lr });
        info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.2e}");
        if !val_loss.is_finite() {
            warn!("epoch {epoch}: non-finite validation loss, stopping");
            stop = StopReason::Diverged;
            break;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = weights.clone();
        }
        if anchor_val.is_infinite() || best_val < anchor_val * (1.0 - cfg.min_rel_improvement) {
            anchor_val = best_val;
            anchor_epoch = epoch;
        } else if epoch - anchor_epoch >= cfg.patience_epochs {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    if best_epoch == 0 {
        return Err(Error::Numerical("training diverged before the first validated epoch".into()));
    }
    Ok(TrainOutcome { best, best_epoch, best_val_loss: best_val, history, stop, adam })
}

fn epoch_order(len: usize, per_epoch: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let want = per_epoch.unwrap_or(len);
    let mut order = Vec::with_capacity(want);
    while order.len() < want {
        let mut pass: Vec<usize> = (0..len).collect();
        pass.shuffle(rng);
        order.extend(pass.into_iter().take(want - order.len()));
    }
    order
}

/// Writes `epoch,train_loss,val_loss,lr` rows.
pub fn write_loss_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn format_loss_history(history: &[EpochRecord]) -> String {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in history {
            w.serialize(r).expect("in-memory csv");
        }
        w.flush().expect("in-memory csv");
    }
    String::from_utf8(out).expect("csv is utf-8")
}
