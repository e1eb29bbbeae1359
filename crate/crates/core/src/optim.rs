//! AdamW with decoupled weight decay, cosine schedule with linear warmup,
//! and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use indexmap::IndexMap;

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 1.2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: AdamWHyper,
}

impl AdamWState {
    pub fn new(len: usize, hyper: AdamWHyper) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            hyper,
        }
    }
}

/// One AdamW update of `param` in place. `lr` overrides `state.hyper.lr`
/// so schedules and per-group multipliers stay outside the state.
pub fn adamw_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamWState, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(shape_err(format!(
            "parameter {:?} vs gradient {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(shape_err("optimizer moments do not match parameter"));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient passed to adamw_step".into()));
    }
    let h = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let decay = lr * h.weight_decay;
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        if decay != 0.0 {
            *p -= decay * *p;
        }
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Self {
            peak_lr,
            min_lr,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(invalid(format!(
                "warmup steps {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.min_lr > self.peak_lr {
            return Err(invalid("min lr above peak lr"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        cosine_warmup_lr(step, self)
    }
}

/// Linear ramp from 0 to `peak_lr` over the warmup, then half-cosine decay
/// from `peak_lr` to `min_lr` at `total_steps`.
pub fn cosine_warmup_lr(step: u64, sched: &LrSchedule) -> Result<f64> {
    sched.validate()?;
    if step > sched.total_steps {
        return Err(invalid(format!(
            "step {step} beyond schedule length {}",
            sched.total_steps
        )));
    }
    if step < sched.warmup_steps {
        return Ok(sched.peak_lr * step as f64 / sched.warmup_steps as f64);
    }
    let span = (sched.total_steps - sched.warmup_steps) as f64;
    let progress = (step - sched.warmup_steps) as f64 / span;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(sched.min_lr + (sched.peak_lr - sched.min_lr) * cos)
}

/// Rescales all gradients by a common factor so their global ℓ2 norm is at
/// most `max_norm`. Returns the factor (1 when already within bounds).
pub fn clip_grad_norm<'a>(grads: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(invalid("max_norm must be positive"));
    }
    let mut grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let total: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total <= max_norm || !total.is_finite() {
        return Ok(1.0);
    }
    let scale = max_norm / total;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(scale)
}

/// Whether weight decay skips this tensor: biases, norm scales, the CLS
/// token and position tables.
pub fn skips_weight_decay(name: &str, shape: &[usize]) -> bool {
    shape.len() <= 1 || name == "pos_embed" || name.contains("rel_pos.")
}

struct Slot {
    state: AdamWState,
    lr_scale: f64,
}

/// AdamW over a named parameter store with per-tensor learning-rate
/// multipliers. Updated parameters are rounded to f32.
pub struct Optimizer {
    slots: IndexMap<String, Slot>,
}

impl Optimizer {
    pub fn new(params: &Params, hyper: AdamWHyper) -> Self {
        let slots = params
            .iter()
            .map(|(name, t)| {
                let mut h = hyper;
                if skips_weight_decay(name, t.shape()) {
                    h.weight_decay = 0.0;
                }
                let slot = Slot {
                    state: AdamWState::new(t.len(), h),
                    lr_scale: 1.0,
                };
                (name.clone(), slot)
            })
            .collect();
        Self { slots }
    }

    pub fn set_lr_scale(&mut self, name: &str, scale: f64) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        slot.lr_scale = scale;
        Ok(())
    }

    pub fn lr_scale(&self, name: &str) -> Option<f64> {
        self.slots.get(name).map(|s| s.lr_scale)
    }

    pub fn weight_decay(&self, name: &str) -> Option<f64> {
        self.slots.get(name).map(|s| s.state.hyper.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.slots.values().map(|s| s.state.step).max().unwrap_or(0)
    }

    /// Applies one update to every tensor in `params` from `grads` at base
    /// rate `lr`.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            adamw_step(p, grads.get(name)?, &mut slot.state, lr * slot.lr_scale)?;
            p.round_to_f32();
        }
        Ok(())
    }
}
