//! Downstream evaluation: supervised fine-tuning with layer-wise
//! learning-rate decay, the linear probe, and top-1 evaluation.

mod probe;

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::pad_crop_flip;
use crate::autograd::{log_softmax_row, smoothed_target, Graph};
use crate::distill::train::{epoch_schedule, seeded};
use crate::error::{invalid, shape_err, Result};
use crate::io::data::{Dataset, ToyData};
use crate::model::{Encoder, EncoderConfig, ForwardOptions};
use crate::optim::{clip_grad_norm, AdamWHyper, Optimizer};
use crate::tensor::Tensor;

pub use probe::{fit_linear_probe, gap_features, linear_probe_run, ProbeConfig, ProbeResult};

/// Batch size used for gradient-free evaluation passes.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `optimizer.lr` is the peak of the schedule.
    pub optimizer: AdamWHyper,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub layer_decay: f64,
    pub drop_path_rate: f64,
    pub label_smoothing: f64,
    pub clip: f64,
    /// Random pad-crop and horizontal flip.
    pub augment: bool,
    pub crop_padding: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            optimizer: AdamWHyper {
                lr: 5e-3,
                ..AdamWHyper::default()
            },
            min_lr: 2e-6,
            warmup_epochs: 20,
            layer_decay: 0.65,
            drop_path_rate: 0.3,
            label_smoothing: 0.1,
            clip: 5.0,
            augment: true,
            crop_padding: 2,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(invalid(format!("layer decay {} outside (0, 1]", self.layer_decay)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(invalid(format!("drop path rate {} outside [0, 1)", self.drop_path_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("gradient clip must be positive"));
        }
        if self.min_lr > self.optimizer.lr {
            return Err(invalid("min lr above peak lr"));
        }
        Ok(())
    }
}

/// Depth index of a parameter: 0 for the stem (patch embedding, CLS token,
/// position tables shared by all layers), `i + 1` for block `i`, and
/// `depth + 1` for the final norm and the head.
pub fn layer_group(name: &str, depth: usize) -> usize {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let idx = rest.split('.').next().and_then(|s| s.parse::<usize>().ok());
        if let Some(i) = idx {
            return i + 1;
        }
    }
    if name.starts_with("norm.") || name.starts_with("head.") {
        return depth + 1;
    }
    0
}

/// Learning-rate multipliers `decay^(depth + 1 - i)` for groups
/// `i = 0..=depth + 1`.
pub fn layer_decay_scales(depth: usize, decay: f64) -> Result<Vec<f64>> {
    if depth == 0 {
        return Err(invalid("layer decay needs at least one block"));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(invalid(format!("layer decay {decay} outside (0, 1]")));
    }
    Ok((0..=depth + 1)
        .map(|i| decay.powi((depth + 1 - i) as i32))
        .collect())
}

/// Mean label-smoothed cross-entropy: the target puts `1 - eps + eps/K` on
/// the label and `eps/K` on every other class.
pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(shape_err(format!("logits {s:?} with {} labels", labels.len())));
    }
    let k = s[1];
    if k < 2 {
        return Err(invalid("cross-entropy needs at least two classes"));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(invalid(format!("label smoothing {eps} outside [0, 1)")));
    }
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(invalid(format!("label {label} out of range for {k} classes")));
        }
        let lp = log_softmax_row(row);
        total -= lp
            .iter()
            .enumerate()
            .map(|(j, l)| smoothed_target(j, label, k, eps) * l)
            .sum::<f64>();
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest logit, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Number of rows of `logits [B, K]` whose argmax equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.last_dim().max(1);
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

pub fn top1(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    count_correct(logits, labels) as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Plain cross-entropy (no smoothing), averaged over the set.
    pub loss: f64,
    pub top1: f64,
}

/// Single eval-mode pass over `data` in storage order.
pub fn evaluate(enc: &Encoder, data: &Dataset) -> Result<Evaluation> {
    if enc.cfg.num_classes.is_none() {
        return Err(invalid("evaluation needs an encoder with a classifier head"));
    }
    if data.is_empty() {
        return Err(invalid("evaluation needs a nonempty dataset"));
    }
    let mut rng = seeded(0, 0);
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in order.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk)?;
        let out = enc.forward(&images, ForwardOptions::eval(), &mut rng)?;
        let logits = out.logits.expect("classifier head present");
        loss += smoothed_cross_entropy(&logits, &labels, 0.0)? * labels.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        top1: correct as f64 / data.len() as f64,
    })
}

pub fn evaluate_top1(enc: &Encoder, data: &Dataset) -> Result<f64> {
    Ok(evaluate(enc, data)?.top1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyRecord {
    pub epoch: usize,
    pub split: Split,
    pub top1: f64,
}

pub struct FinetuneRun {
    pub model: Encoder,
    /// Validation accuracy at epoch 0 (before training), then running
    /// train accuracy and validation accuracy for every epoch.
    pub curve: Vec<AccuracyRecord>,
}

impl FinetuneRun {
    pub fn final_val_top1(&self) -> f64 {
        self.curve
            .iter()
            .rev()
            .find(|r| r.split == Split::Val)
            .map_or(0.0, |r| r.top1)
    }
}

/// Fine-tunes a copy of `init` with a fresh classifier head sized to the
/// data. `init` itself is never modified.
pub fn finetune_run(
    init: &Encoder,
    data: &ToyData,
    cfg: &FinetuneConfig,
    on_epoch: impl FnMut(usize, f64, f64),
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let mut model = init.clone();
    model.reset_head(Some(data.train.classes), &mut seeded(cfg.seed, 0))?;
    train_classifier(model, data, cfg, on_epoch)
}

/// Supervised training of a freshly initialized encoder. Used for the
/// desk-scale teacher and for from-scratch baselines.
pub fn train_from_scratch(
    arch: &EncoderConfig,
    data: &ToyData,
    cfg: &FinetuneConfig,
    on_epoch: impl FnMut(usize, f64, f64),
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let arch = arch.clone().with_classes(Some(data.train.classes));
    let model = Encoder::init(arch, &mut seeded(cfg.seed, 0))?;
    train_classifier(model, data, cfg, on_epoch)
}

fn train_classifier(
    mut model: Encoder,
    data: &ToyData,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<FinetuneRun> {
    if data.train.is_empty() {
        return Err(invalid("fine-tuning needs a nonempty training set"));
    }
    if data.train.image_shape() != [model.cfg.in_channels, model.cfg.image_size, model.cfg.image_size] {
        return Err(shape_err(format!(
            "dataset images {:?} do not fit the encoder",
            data.train.image_shape()
        )));
    }
    let mut curve = vec![AccuracyRecord {
        epoch: 0,
        split: Split::Val,
        top1: evaluate_top1(&model, &data.val)?,
    }];
    if cfg.epochs == 0 {
        return Ok(FinetuneRun { model, curve });
    }

    let depth = model.cfg.depth;
    let mut opt = Optimizer::new(&model.params, cfg.optimizer);
    if depth > 0 {
        let scales = layer_decay_scales(depth, cfg.layer_decay)?;
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            opt.set_lr_scale(&name, scales[layer_group(&name, depth)])?;
        }
    }
    let mut shuffle_rng = seeded(cfg.seed, 1);
    let mut aug_rng = seeded(cfg.seed, 2);
    let mut path_rng = seeded(cfg.seed, 3);
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let sched = epoch_schedule(cfg.optimizer.lr, cfg.min_lr, cfg.warmup_epochs, cfg.epochs, per_epoch)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let (images, labels) = data.train.batch(chunk)?;
            let images = if cfg.augment {
                pad_crop_flip(&images, cfg.crop_padding, &mut aug_rng)?
            } else {
                images
            };
            correct += classifier_step(
                &mut model,
                &mut opt,
                &images,
                &labels,
                cfg,
                sched.lr_at(step)?,
                &mut path_rng,
            )?;
        }
        let train = correct as f64 / data.train.len() as f64;
        let val = evaluate_top1(&model, &data.val)?;
        curve.push(AccuracyRecord { epoch, split: Split::Train, top1: train });
        curve.push(AccuracyRecord { epoch, split: Split::Val, top1: val });
        on_epoch(epoch, train, val);
    }
    Ok(FinetuneRun { model, curve })
}

/// One supervised update; returns how many samples the pre-update logits
/// classified correctly.
fn classifier_step<R: Rng + ?Sized>(
    model: &mut Encoder,
    opt: &mut Optimizer,
    images: &Tensor,
    labels: &[usize],
    cfg: &FinetuneConfig,
    lr: f64,
    rng: &mut R,
) -> Result<usize> {
    let mut g = Graph::new();
    let vars = model.params.load(&mut g, true);
    let out = model.forward_graph(&mut g, &vars, images, ForwardOptions::train(cfg.drop_path_rate), rng)?;
    let logits = out.logits.ok_or_else(|| invalid("encoder has no classifier head"))?;
    let correct = count_correct(g.value(logits), labels);
    let loss = g.cross_entropy(logits, labels, cfg.label_smoothing)?;
    if !g.value(loss).item().is_finite() {
        return Err(crate::Error::NonFinite(format!("fine-tuning loss at lr {lr:e}")));
    }
    let grads = g.backward(loss)?;
    let mut grads = model.params.collect_grads(&vars, &grads)?;
    clip_grad_norm(grads.iter_mut().map(|(_, t)| t), cfg.clip)?;
    opt.step(&mut model.params, &grads, lr)?;
    Ok(correct)
}

/// Accuracy curve as CSV with columns `epoch,split,top1`.
pub fn write_accuracy_csv<W: Write>(mut w: W, curve: &[AccuracyRecord]) -> Result<()> {
    writeln!(w, "epoch,split,top1")?;
    for r in curve {
        writeln!(w, "{},{},{}", r.epoch, r.split, r.top1)?;
    }
    Ok(())
}
