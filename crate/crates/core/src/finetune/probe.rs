use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{top1, EVAL_BATCH};
use crate::autograd::Graph;
use crate::distill::train::{epoch_schedule, seeded};
use crate::distill::{extract_target, TargetKind};
use crate::error::{invalid, shape_err, Result};
use crate::io::data::{Dataset, ToyData};
use crate::model::{Encoder, ForwardOptions};
use crate::optim::{AdamWHyper, Optimizer};
use crate::params::Params;
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWHyper,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 64,
            optimizer: AdamWHyper {
                lr: 1e-2,
                weight_decay: 0.0,
                ..AdamWHyper::default()
            },
            min_lr: 0.0,
            warmup_epochs: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_top1: f64,
    pub val_top1: f64,
    /// `[D, K]` classifier over standardized features.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Eval-mode GAP features `[N, D]` of every image in `data`.
pub fn gap_features(enc: &Encoder, data: &Dataset) -> Result<Tensor> {
    let mut rng = seeded(0, 0);
    let order: Vec<usize> = (0..data.len()).collect();
    let mut feats = Vec::with_capacity(data.len() * enc.cfg.dim);
    for chunk in order.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk)?;
        let out = enc.forward(&images, ForwardOptions::eval(), &mut rng)?;
        feats.extend_from_slice(extract_target(&out, TargetKind::Gap)?.data());
    }
    Tensor::new(vec![data.len(), enc.cfg.dim], feats)
}

/// Per-feature mean and standard deviation over the rows of `x`.
fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.last_dim();
    let n = (x.len() / d.max(1)).max(1) as f64;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        var.iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect())
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

fn logits(params: &Params, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.load(&mut g, false);
    let xv = g.constant(x.clone());
    let y = g.linear(xv, vars["weight"], Some(vars["bias"]))?;
    Ok(g.value(y).clone())
}

/// Trains a linear classifier on fixed features, standardized with the
/// training-set moments.
pub fn fit_linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (ts, vs) = (train_x.shape(), val_x.shape());
    if ts.len() != 2 || vs.len() != 2 || ts[1] != vs[1] || ts[0] != train_y.len() || vs[0] != val_y.len() {
        return Err(shape_err(format!("probe features {ts:?} / {vs:?} do not match labels")));
    }
    if train_y.is_empty() || cfg.batch_size == 0 || classes < 2 {
        return Err(invalid("probe needs data, a positive batch size and two classes"));
    }
    let d = ts[1];
    let (mean, std) = moments(train_x);
    let train_x = standardize(train_x, &mean, &std);
    let val_x = standardize(val_x, &mean, &std);

    let mut params = Params::new();
    params.insert("weight", Tensor::zeros(&[d, classes]))?;
    params.insert("bias", Tensor::zeros(&[classes]))?;
    let mut opt = Optimizer::new(&params, cfg.optimizer);
    let mut shuffle_rng = seeded(cfg.seed, 1);
    let n = train_y.len();
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.epochs > 0 {
        let per_epoch = n.div_ceil(cfg.batch_size);
        let sched = epoch_schedule(cfg.optimizer.lr, cfg.min_lr, cfg.warmup_epochs, cfg.epochs, per_epoch)?;
        let mut step = 0u64;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size) {
                step += 1;
                let xb = train_x.select_first(chunk)?;
                let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
                let mut g = Graph::new();
                let vars = params.load(&mut g, true);
                let xv = g.constant(xb);
                let z = g.linear(xv, vars["weight"], Some(vars["bias"]))?;
                let loss = g.cross_entropy(z, &yb, 0.0)?;
                let grads = g.backward(loss)?;
                let grads = params.collect_grads(&vars, &grads)?;
                opt.step(&mut params, &grads, sched.lr_at(step)?)?;
            }
        }
    }
    Ok(ProbeResult {
        train_top1: top1(&logits(&params, &train_x)?, train_y),
        val_top1: top1(&logits(&params, &val_x)?, val_y),
        weight: params.get("weight")?.clone(),
        bias: params.get("bias")?.clone(),
    })
}

/// Linear probe on the frozen encoder's GAP features.
pub fn linear_probe_run(enc: &Encoder, data: &ToyData, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let train_x = gap_features(enc, &data.train)?;
    let val_x = gap_features(enc, &data.val)?;
    fit_linear_probe(&train_x, &data.train.labels, &val_x, &data.val.labels, data.train.classes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_features_are_learned_exactly() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let feats: Vec<f64> = labels
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| {
                let mut row = vec![0.01 * (i % 7) as f64; 6];
                row[l] += 1.0;
                row
            })
            .collect();
        let x = Tensor::new(vec![40, 6], feats).unwrap();
        let cfg = ProbeConfig { epochs: 30, batch_size: 8, ..ProbeConfig::default() };
        let r = fit_linear_probe(&x, &labels, &x, &labels, 4, &cfg).unwrap();
        assert_eq!(r.train_top1, 1.0);
        assert_eq!(r.val_top1, 1.0);
    }

    #[test]
    fn constant_feature_does_not_blow_up() {
        let x = Tensor::full(&[4, 2], 3.0);
        let (m, s) = moments(&x);
        assert_eq!(m, vec![3.0, 3.0]);
        assert_eq!(s, vec![STD_FLOOR, STD_FLOOR]);
        assert!(standardize(&x, &m, &s).data().iter().all(|&v| v == 0.0));
    }
}
