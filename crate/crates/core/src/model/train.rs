//! AdamW training with a per-epoch polynomial schedule and best-F1 selection.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, EvalOptions};
use super::Model;
use crate::data::{augment, collate, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::nn::{apply_bn_updates, Ctx, ParamStore};
use crate::numerics::{adamw_step, poly_lr, AdamWConfig, AdamWState, Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Polynomial decay exponent.
    pub power: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Random flips and quarter turns per sample and step.
    pub augment: bool,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Evaluate on the validation set after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            epochs: 1,
            batch: 2,
            power: 0.9,
            seed: 42,
            loss: LossWeights::default(),
            augment: true,
            max_steps: None,
            validate: true,
        }
    }
}

/// One optimizer step, printed as `epoch step loss lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.8} {:.6e}", self.epoch, self.step, self.loss, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    pub log: Vec<LogEntry>,
    /// Validation F1 at 0.5 per finished epoch.
    pub val_f1: Vec<f64>,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    /// Parameters at the best validation epoch.
    pub best: ParamStore<T>,
    /// True when no validation samples were given and the training set was
    /// scored instead.
    pub validated_on_train: bool,
}

fn step_seed(seed: u64, step: usize, k: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// One forward/backward/update on a batch. Returns the loss.
fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[&Sample],
    cfg: &TrainConfig,
    lr: f64,
    opt: &mut AdamWState<T>,
    adam: &AdamWConfig,
    dropout_seed: u64,
) -> Result<(f64, [f64; 3])> {
    let (x, y) = collate::<T>(batch)?;
    let tape = Tape::new();
    let (loss, parts, grads, bn) = {
        let ctx = Ctx::new(&tape, &model.store, true).with_dropout_seed(dropout_seed);
        let out = model.forward(&ctx, tape.constant(x))?;
        let br = total_loss(&tape, &out, &y, &cfg.loss)?;
        let loss = tape.value(br.total).item().as_f64();
        if !loss.is_finite() {
            return Ok((loss, [br.bce, br.dice, br.boundary]));
        }
        let g = tape.backward(br.total)?;
        let grads: HashMap<_, Tensor<T>> = ctx
            .used_params()
            .into_iter()
            .filter_map(|(id, v)| g.get(v).map(|t| (id, t.clone())))
            .collect();
        (loss, [br.bce, br.dice, br.boundary], grads, ctx.take_bn_updates())
    };
    let mut params = model.store.trainable_mut();
    let zeros: Vec<Tensor<T>> = params.iter().filter(|(id, _)| !grads.contains_key(id)).map(|(_, p)| Tensor::zeros(p.shape())).collect();
    let mut zi = zeros.iter();
    let grad_refs: Vec<&Tensor<T>> = params
        .iter()
        .map(|(id, _)| grads.get(id).unwrap_or_else(|| zi.next().expect("zero gradient")))
        .collect();
    let mut refs: Vec<&mut Tensor<T>> = params.iter_mut().map(|(_, p)| &mut **p).collect();
    adamw_step(&mut refs, &grad_refs, opt, lr, adam)?;
    apply_bn_updates(&mut model.store, bn)?;
    Ok((loss, parts))
}

/// Train `model` in place. Each epoch shuffles `train` with the seeded
/// generator, runs one AdamW step per batch at `poly_lr(lr, epoch)`, and logs
/// every step through `on_step`. Batches smaller than two are skipped because
/// batch norm needs two samples. After each epoch the F1 at 0.5 on `val` (or
/// on `train` when `val` is empty) selects the best parameters.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainReport<T>> {
    if cfg.batch < 2 {
        return Err(Error::Config(format!(
            "batch size {} is too small: batch norm in training mode needs at least 2 samples per batch",
            cfg.batch
        )));
    }
    if train.len() < 2 {
        return Err(Error::Data(format!("training set has {} samples; at least 2 are required", train.len())));
    }
    if !(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
    }
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamWState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let validated_on_train = val.is_empty();
    let val_set = if validated_on_train { train } else { val };
    let mut report = TrainReport {
        log: Vec::new(),
        val_f1: Vec::new(),
        best_val_f1: f64::NEG_INFINITY,
        best_epoch: 0,
        best: model.store.clone(),
        validated_on_train,
    };
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let lr = poly_lr(cfg.lr, epoch - 1, cfg.epochs, cfg.power)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            let augmented: Vec<Sample> = if cfg.augment {
                chunk.iter().enumerate().map(|(k, &i)| augment(&train[i], step_seed(cfg.seed, step, k))).collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| train[i].clone()).collect()
            };
            let batch: Vec<&Sample> = augmented.iter().collect();
            let (loss, [bce, dice, bnd]) = train_step(model, &batch, cfg, lr, &mut opt, &adam, step_seed(cfg.seed, step, usize::MAX))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step} (lr {lr:e}): bce={bce} dice={dice} boundary={bnd}; lower the learning rate"
                )));
            }
            let entry = LogEntry { epoch, step, loss, lr };
            on_step(&entry);
            report.log.push(entry);
        }
        if cfg.validate {
            let f1 = evaluate(model, val_set, 0.0, &EvalOptions::default())?.f1;
            report.val_f1.push(f1);
            if f1 > report.best_val_f1 {
                report.best_val_f1 = f1;
                report.best_epoch = epoch;
                report.best = model.store.clone();
            }
        }
    }
    if !cfg.validate || report.best_epoch == 0 {
        report.best = model.store.clone();
        report.best_epoch = cfg.epochs;
    }
    Ok(report)
}
