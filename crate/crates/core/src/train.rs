//! Supervised training, evaluation and masked-patch pretraining loops.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape};
use crate::config::ViTConfig;
use crate::data::{check_compatible, Dataset};
use crate::error::{config_err, Error, Result};
use crate::masking::{mim_loss, sample_mask, MimHead, DEFAULT_MASK_RATIO};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::params::{apply_bn_updates, Bindings, Ctx, BN_MOMENTUM};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{build_model, Forward, Model};

/// Base learning rate used for a model of this width when none is given.
pub fn default_lr(config: &ViTConfig) -> f64 {
    if config.width <= 384 {
        4e-3
    } else {
        3e-3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub exec: Forward,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            optimizer,
            seed,
            exec: Forward::Parallel,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,eval_loss,eval_acc";

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_acc,
                opt(r.eval_loss),
                opt(r.eval_acc)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }
}

fn argmax_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            best.0 == l
        })
        .count()
}

fn grad_norm<T: Scalar>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub grad_norm: f64,
}

/// One cross-entropy step in train mode: forward, backward, optimizer
/// update and batch-norm running-statistics update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    images: &Tensor<T>,
    labels: &[usize],
    exec: Forward,
    rng: &mut Rng,
    step: usize,
) -> Result<StepStats> {
    let tape = Tape::new();
    let (stats, grads, bn) = {
        let ctx = Ctx::new(&tape, &model.params, Mode::Train, Some(rng));
        let logits = model.logits_var(&ctx, tape.constant(images.clone()), exec)?;
        let correct = argmax_hits(&logits.value(), labels);
        let loss = logits.cross_entropy(labels)?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr: opt.lr(),
                grad_norm: f64::NAN,
            });
        }
        let g = tape.backward(loss)?;
        let grads = ctx.params.gradients(&g);
        let stats = StepStats {
            loss: value,
            correct,
            grad_norm: grad_norm(&grads),
        };
        (stats, grads, ctx.take_bn_updates())
    };
    if !stats.grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            lr: opt.lr(),
            grad_norm: stats.grad_norm,
        });
    }
    opt.step(&mut model.params, &grads)?;
    apply_bn_updates(&mut model.params, &bn, BN_MOMENTUM);
    Ok(stats)
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset<T>, batch_size: usize, exec: Forward) -> Result<(f64, f64)> {
    check_compatible(ds, model.config.image_size, model.config.num_classes)?;
    let (mut loss, mut hits) = (0.0, 0);
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, labels) = ds.batch(chunk);
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &model.params);
        let logits = model.logits_var(&ctx, tape.constant(images), exec)?;
        hits += argmax_hits(&logits.value(), &labels);
        loss += logits.cross_entropy(&labels)?.value().data()[0].as_f64() * labels.len() as f64;
    }
    Ok((loss / ds.len() as f64, hits as f64 / ds.len() as f64))
}

/// Trains `model` in place with seeded shuffling and a per-step cosine
/// learning-rate decay. One metrics row per epoch.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    eval: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<MetricsLog> {
    cfg.validate()?;
    check_compatible(train, model.config.image_size, model.config.num_classes)?;
    let mut opt = cfg.optimizer.build::<T>()?;
    let mut order_rng = Rng::stream(cfg.seed, 1);
    let mut sd_rng = Rng::stream(cfg.seed, 2);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut log = MetricsLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_lr = cosine_lr(cfg.optimizer.lr(), step, total);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let (mut loss, mut hits) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            opt.set_lr(cosine_lr(cfg.optimizer.lr(), step, total))?;
            let (images, labels) = train.batch(chunk);
            let s = train_step(model, &mut opt, &images, &labels, cfg.exec, &mut sd_rng, step)?;
            loss += s.loss * chunk.len() as f64;
            hits += s.correct;
            step += 1;
        }
        let (eval_loss, eval_acc) = match eval {
            Some(ds) => {
                let (l, a) = evaluate(model, ds, cfg.batch_size, cfg.exec)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        log.rows.push(EpochMetrics {
            epoch: epoch + 1,
            lr: epoch_lr,
            train_loss: loss / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            eval_loss,
            eval_acc,
        });
    }
    Ok(log)
}

/// Builds a model from `config` (seeded by `cfg.seed`) and trains it.
pub fn train<T: Scalar>(
    config: &ViTConfig,
    train: &Dataset<T>,
    eval: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, MetricsLog)> {
    let mut model = build_model(config, &mut Rng::stream(cfg.seed, 0))?;
    let log = fit(&mut model, train, eval, cfg)?;
    Ok((model, log))
}

/// One masked-patch regression step on `images`; updates both the model and
/// the head.
#[allow(clippy::too_many_arguments)]
pub fn mim_step<T: Scalar>(
    model: &mut Model<T>,
    head: &mut MimHead<T>,
    opt_model: &mut Optimizer<T>,
    opt_head: &mut Optimizer<T>,
    images: &Tensor<T>,
    mask: &crate::masking::PatchMask,
    rng: &mut Rng,
    step: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let (loss, grads_model, grads_head, bn) = {
        let ctx = Ctx::new(&tape, &model.params, Mode::Train, Some(rng));
        let hb = Bindings::new(&tape, &head.params);
        let loss = mim_loss(&ctx, &hb, head, model, images, mask)?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr: opt_model.lr(),
                grad_norm: f64::NAN,
            });
        }
        let g = tape.backward(loss)?;
        (value, ctx.params.gradients(&g), hb.gradients(&g), ctx.take_bn_updates())
    };
    let norm = (grad_norm(&grads_model).powi(2) + grad_norm(&grads_head).powi(2)).sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            lr: opt_model.lr(),
            grad_norm: norm,
        });
    }
    opt_model.step(&mut model.params, &grads_model)?;
    opt_head.step(&mut head.params, &grads_head)?;
    apply_bn_updates(&mut model.params, &bn, BN_MOMENTUM);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MimEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub mim_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MimLog {
    pub rows: Vec<MimEpoch>,
}

impl MimLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mim_loss\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.lr, r.mim_loss);
        }
        out
    }
}

/// Masked-patch pretraining: a fresh mask of `ratio` per batch, mask token
/// inserted after the stem.
pub fn pretrain_mim<T: Scalar>(
    model: &mut Model<T>,
    head: &mut MimHead<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    ratio: Option<f64>,
) -> Result<MimLog> {
    cfg.validate()?;
    check_compatible(data, model.config.image_size, model.config.num_classes)?;
    let ratio = ratio.unwrap_or(DEFAULT_MASK_RATIO);
    let mut opt_model = cfg.optimizer.build::<T>()?;
    let mut opt_head = cfg.optimizer.build::<T>()?;
    let mut order_rng = Rng::stream(cfg.seed, 1);
    let mut sd_rng = Rng::stream(cfg.seed, 2);
    let mut mask_rng = Rng::stream(cfg.seed, 3);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let tokens = model.config.num_patches();
    let mut log = MimLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_lr = cosine_lr(cfg.optimizer.lr(), step, total);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order_rng.shuffle(&mut order);
        let mut loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.optimizer.lr(), step, total);
            opt_model.set_lr(lr)?;
            opt_head.set_lr(lr)?;
            let (images, _) = data.batch(chunk);
            let mut mask = sample_mask(&mut mask_rng, tokens, ratio)?;
            if mask.masked() == 0 {
                // Tiny grids can round to an empty mask; keep the loss defined.
                mask.bits[mask_rng.below(tokens)] = true;
            }
            let l = mim_step(
                model,
                head,
                &mut opt_model,
                &mut opt_head,
                &images,
                &mask,
                &mut sd_rng,
                step,
            )?;
            loss += l * chunk.len() as f64;
            step += 1;
        }
        log.rows.push(MimEpoch {
            epoch: epoch + 1,
            lr: epoch_lr,
            mim_loss: loss / data.len() as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn tiny() -> ViTConfig {
        ViTConfig::custom(16, 1, 2).with_image_size(32).with_classes(10)
    }

    #[test]
    fn one_epoch_plumbing() {
        let ds = synth_dataset::<f32>(0, 64, 32, 10).unwrap();
        let cfg = TrainConfig::new(1, 16, OptimizerConfig::adamw(1e-3), 1);
        let (_, log) = train(&tiny(), &ds, Some(&ds), &cfg).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert!(log.rows[0].train_loss.is_finite());
        assert_eq!(log.to_csv().lines().count(), 2);
    }

    #[test]
    fn exploding_lr_aborts_with_diagnostics() {
        let ds = synth_dataset::<f32>(0, 32, 32, 10).unwrap();
        let cfg = TrainConfig::new(50, 8, OptimizerConfig::sgd(1e12), 1);
        match train(&tiny(), &ds, None, &cfg) {
            Err(Error::NonFiniteLoss { lr, .. }) => assert!(lr > 0.0),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn incompatible_dataset_is_rejected() {
        let ds = synth_dataset::<f32>(0, 8, 16, 10).unwrap();
        let cfg = TrainConfig::new(1, 4, OptimizerConfig::adamw(1e-3), 1);
        assert!(train(&tiny(), &ds, None, &cfg).is_err());
    }
}
