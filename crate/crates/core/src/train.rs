//! Supervised training: BCE + soft-Dice loss, Adam, cosine learning rate.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::metrics::{dice, hd95, iou, Mask};
use crate::model::Model;
use crate::nn::{Ctx, Module, Slot};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of samples used for training; the rest validate.
    pub split: f64,
    pub seed: u64,
    pub bce_weight: f64,
    pub dice_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            split: 0.7,
            seed: 0,
            bce_weight: 1.0,
            dice_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("train.split must be in (0, 1), got {}", self.split));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 {
            return bad("train loss weights must be nonnegative".into());
        }
        Ok(())
    }
}

/// Sample indices of a seeded train/validation partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    /// Shuffles `0..n` with `seed` and cuts at `round(n * fraction)`, keeping
    /// at least one sample on each side when `n >= 2`.
    pub fn new(n: usize, fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = if n >= 2 {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        } else {
            n
        };
        let val = idx.split_off(cut);
        Self { train: idx, val }
    }

    /// Short digest of both index lists, for checking that runs share a split.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, list) in [(b'T', &self.train), (b'V', &self.val)] {
            h.update([tag]);
            for &i in list.iter() {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss,dice,iou";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.dice, self.iou)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Mean validation metrics. `hd95` averages only samples where both masks
/// are nonempty and is `None` when there are none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub n: usize,
}

const EVAL_BATCH: usize = 8;

/// `[N, C, H, W]` images and `[N, 1, H, W]` masks.
pub fn stack<T: Scalar>(samples: &[&SegSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let (h, w) = (first.mask.height(), first.mask.width());
    let mut img = Vec::with_capacity(samples.len() * first.image.numel());
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != shape || (s.mask.height(), s.mask.width()) != (h, w) {
            return Err(Error::Data(format!(
                "sample {} has shape {:?}, batch expects {shape:?}",
                s.id,
                s.image.shape()
            )));
        }
        img.extend(s.image.data().iter().map(|&v| T::from_f32(v).expect("f32")));
        mask.extend(
            s.mask
                .bits()
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() }),
        );
    }
    let n = samples.len();
    Ok((
        Tensor::new([n, shape[0], shape[1], shape[2]], img)?,
        Tensor::new([n, 1, h, w], mask)?,
    ))
}

/// Thresholds each logit map at 0 (probability 0.5).
pub fn logits_to_masks<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Mask>> {
    let [n, _, h, w] = logits.shape()[..] else {
        return Err(Error::Shape(format!(
            "logits must be [N, 1, H, W], got {:?}",
            logits.shape()
        )));
    };
    let per = logits.numel() / n.max(1);
    if per != h * w {
        return Err(Error::Shape(
            "mask conversion needs one class channel".into(),
        ));
    }
    (0..n)
        .map(|i| Mask::threshold(h, w, &logits.data()[i * per..(i + 1) * per], T::zero()))
        .collect()
}

/// Evaluation-mode metrics of `model` on `samples`.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[&SegSample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let (mut d, mut j, mut hd, mut hd_n) = (0.0, 0.0, 0.0, 0usize);
    for chunk in samples.chunks(EVAL_BATCH) {
        let (x, _) = stack::<T>(chunk)?;
        let preds = logits_to_masks(&model.predict(&x)?)?;
        for (p, s) in preds.iter().zip(chunk) {
            d += dice(p, &s.mask)?;
            j += iou(p, &s.mask)?;
            if !p.is_empty() && !s.mask.is_empty() {
                hd += hd95(p, &s.mask, (1.0, 1.0))?;
                hd_n += 1;
            }
        }
    }
    let n = samples.len();
    Ok(EvalMetrics {
        dice: d / n as f64,
        iou: j / n as f64,
        hd95: (hd_n > 0).then(|| hd / hd_n as f64),
        n,
    })
}

/// Adam with bias correction; state is kept in parameter visit order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    /// Applies one update with learning rate `lr` from the accumulated gradients.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let cast = T::from_f64_lossy;
        let (b1, b2, eps) = (cast(self.beta1), cast(self.beta2), cast(self.eps));
        let (lr_t, c2_sqrt) = (cast(lr / c1), cast(c2.sqrt()));
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p| {
            let i = slot;
            slot += 1;
            if ms.len() <= i {
                ms.push(vec![T::zero(); p.numel()]);
                vs.push(vec![T::zero(); p.numel()]);
            }
            let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) else {
                return;
            };
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= lr_t * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        });
    }
}

/// Consecutive chunks of `batch` indices. A trailing single sample joins the
/// previous chunk, since batch statistics of one sample at a 1x1 stage are
/// undefined.
pub fn batches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
    let n = order.len();
    let mut full = n / batch;
    if n % batch == 1 && full > 0 && batch > 1 {
        full -= 1;
    }
    let cut = full * batch;
    order[..cut]
        .chunks(batch)
        .chain((cut < n).then(|| &order[cut..]))
}

/// `base · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// L2 norm over every parameter.
pub fn param_norm<T: Scalar, M: Module<T> + ?Sized>(module: &M) -> f64 {
    let mut s = 0.0;
    module.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            s += p
                .value
                .data()
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                .sum::<f64>();
        }
    });
    s.sqrt()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    /// Weights of the epoch with the highest validation Dice (the initial
    /// weights when no epoch ran).
    pub best: Model<T>,
    pub best_epoch: Option<usize>,
    pub split: Split,
}

/// Trains `model` in place; see [`train_with`].
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[SegSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, data, cfg, |_| {})
}

/// Trains `model` in place, calling `on_epoch` after each validation pass.
///
/// Epoch `e` (1-based) visits the training split in an order drawn from
/// `(seed, e)`. The learning rate follows [`cosine_lr`] per optimizer step.
pub fn train_with<T: Scalar>(
    model: &mut Model<T>,
    data: &[SegSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 samples, got {}",
            data.len()
        )));
    }
    if model.config().num_classes != 1 {
        return Err(Error::Config(
            "training supports binary segmentation (num_classes = 1)".into(),
        ));
    }
    let split = Split::new(data.len(), cfg.split, cfg.seed);
    let val: Vec<&SegSample> = split.val.iter().map(|&i| &data[i]).collect();
    let steps_per_epoch = batches(&split.train, cfg.batch_size).count();
    let total = steps_per_epoch * cfg.epochs;
    let (bw, dw) = (
        T::from_f64_lossy(cfg.bce_weight),
        T::from_f64_lossy(cfg.dice_weight),
    );
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_dice = f64::NEG_INFINITY;
    let mut step = 0;
    model.zero_grad();
    for epoch in 1..=cfg.epochs {
        let mut order = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in batches(&order, cfg.batch_size).enumerate() {
            let samples: Vec<&SegSample> = idx.iter().map(|&i| &data[i]).collect();
            let (x, y) = stack::<T>(&samples)?;
            let tape = Tape::new();
            let ctx = Ctx::train(&tape);
            let logits = model.forward(&ctx, tape.constant(x))?;
            let loss = logits
                .bce_with_logits(&y)?
                .scale(bw)
                .add(logits.soft_dice_loss(&y)?.scale(dw))?;
            let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NumericalAbort {
                    epoch,
                    batch,
                    param_norm: param_norm(model),
                });
            }
            let grads = loss.backward()?;
            ctx.accumulate_grads(model, &grads)?;
            adam.step(model, cosine_lr(cfg.learning_rate, step, total));
            model.zero_grad();
            step += 1;
            loss_sum += value;
        }
        let m = evaluate(model, &val)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            dice: m.dice,
            iou: m.iou,
        };
        if record.dice > best_dice {
            best_dice = record.dice;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        split,
    })
}
