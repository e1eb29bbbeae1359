//! Feature distillation: a frozen teacher's (optionally whitened) features
//! regressed by a fresh student through a per-token linear projection
//! under a smooth-ℓ1 loss.

pub(crate) mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::encoder::trunc_normal;
use crate::model::{EncoderOutput, GraphOutput};
use crate::ops::{layer_norm, smooth_l1_scalar, LN_EPS};
use crate::optim::AdamWHyper;
use crate::params::{ParamVars, Params};
use crate::tensor::Tensor;

pub use train::{
    distill_objective, distill_step, run_distillation, teacher_target, write_loss_csv, DistillRun,
    DistillState, StepRecord,
};

/// Guard for ℓ2 normalization of zero vectors.
pub const L2_EPS: f64 = 1e-12;

/// Which teacher output the student regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Every patch token after the final norm.
    FullMap,
    Cls,
    /// Mean of the patch tokens.
    Gap,
    /// Classifier logits; needs a teacher with a head.
    Logit,
}

/// Normalization applied to the teacher target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherNorm {
    None,
    L2,
    Whiten,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::FullMap => "full_map",
            TargetKind::Cls => "cls",
            TargetKind::Gap => "gap",
            TargetKind::Logit => "logit",
        }
    }
}

impl TeacherNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            TeacherNorm::None => "none",
            TeacherNorm::L2 => "l2",
            TeacherNorm::Whiten => "whiten",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for TeacherNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full_map" | "fullmap" => Ok(TargetKind::FullMap),
            "cls" => Ok(TargetKind::Cls),
            "gap" => Ok(TargetKind::Gap),
            "logit" | "logits" => Ok(TargetKind::Logit),
            other => Err(invalid(format!("unknown distillation target `{other}`"))),
        }
    }
}

impl FromStr for TeacherNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(TeacherNorm::None),
            "l2" => Ok(TeacherNorm::L2),
            "whiten" => Ok(TeacherNorm::Whiten),
            other => Err(invalid(format!("unknown teacher normalization `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub beta: f64,
    pub target: TargetKind,
    pub teacher_norm: TeacherNorm,
    pub student_dpr: f64,
    pub teacher_dpr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `optimizer.lr` is the peak of the schedule.
    pub optimizer: AdamWHyper,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub clip: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            target: TargetKind::FullMap,
            teacher_norm: TeacherNorm::Whiten,
            student_dpr: 0.1,
            teacher_dpr: 0.0,
            epochs: 100,
            batch_size: 64,
            optimizer: AdamWHyper::default(),
            min_lr: 2e-5,
            warmup_epochs: 10,
            clip: 3.0,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(invalid("beta must be positive"));
        }
        for (name, p) in [("student", self.student_dpr), ("teacher", self.teacher_dpr)] {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid(format!("{name} drop path rate {p} outside [0, 1)")));
            }
        }
        if self.teacher_dpr > self.student_dpr {
            return Err(invalid(format!(
                "teacher drop path rate {} exceeds the student's {}",
                self.teacher_dpr, self.student_dpr
            )));
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
        if self.augment.enabled {
            self.augment.validate()?;
        }
        Ok(())
    }

    /// Logit targets are always regressed raw.
    pub fn effective_norm(&self) -> TeacherNorm {
        match self.target {
            TargetKind::Logit => TeacherNorm::None,
            _ => self.teacher_norm,
        }
    }
}

/// Per-token linear map `g` from student width to target width.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub params: Params,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(dim_student: usize, dim_teacher: usize, rng: &mut R) -> Result<Self> {
        let mut w = Tensor::new(
            vec![dim_student, dim_teacher],
            trunc_normal(rng, dim_student * dim_teacher, 0.02),
        )?;
        w.round_to_f32();
        Self::from_parts(w, Tensor::zeros(&[dim_teacher]))
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self::from_parts(w, Tensor::zeros(&[dim])).expect("square identity")
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[1]] {
            return Err(shape_err(format!(
                "projection weight {ws:?} and bias {:?} disagree",
                bias.shape()
            )));
        }
        let mut params = Params::new();
        params.insert("weight", weight)?;
        params.insert("bias", bias)?;
        Ok(Self { params })
    }

    pub fn weight(&self) -> &Tensor {
        self.params.get("weight").expect("projection weight")
    }

    pub fn bias(&self) -> &Tensor {
        self.params.get("bias").expect("projection bias")
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.weight().shape();
        (s[0], s[1])
    }

    /// Records `g(s)` on `g`, using handles from `self.params.load`.
    pub fn apply(&self, g: &mut Graph, vars: &ParamVars, s: Var) -> Result<Var> {
        g.linear(s, vars["weight"], Some(vars["bias"]))
    }

    /// Gradient-free `g(s)`.
    pub fn project(&self, s: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.load(&mut g, false);
        let x = g.constant(s.clone());
        let y = self.apply(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

/// Per-token standardization with no learned scale or shift.
pub fn whiten(t: &Tensor) -> Result<Tensor> {
    layer_norm(t, None, LN_EPS)
}

/// Divides each last-axis slice by its ℓ2 norm; zero slices stay zero.
pub fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let c = t.last_dim();
    if c == 0 {
        return Err(shape_err("l2_normalize needs a nonempty last axis"));
    }
    let mut out = t.clone();
    out.clear_grad();
    for row in out.data_mut().chunks_exact_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn normalize_target(t: &Tensor, norm: TeacherNorm) -> Result<Tensor> {
    match norm {
        TeacherNorm::None => {
            let mut out = t.clone();
            out.clear_grad();
            Ok(out)
        }
        TeacherNorm::L2 => l2_normalize(t),
        TeacherNorm::Whiten => whiten(t),
    }
}

/// Batched target: `[B, N_patch, D]` for the full map, `[B, D]` for CLS
/// and GAP, `[B, K]` for logits.
pub fn extract_target(out: &EncoderOutput, kind: TargetKind) -> Result<Tensor> {
    match kind {
        TargetKind::FullMap => Ok(out.patch_features.clone()),
        TargetKind::Cls => Ok(out.cls_feature.clone()),
        TargetKind::Gap => {
            let s = out.patch_features.shape();
            let (b, n, d) = (s[0], s[1], s[2]);
            if n == 0 {
                return Err(shape_err("GAP over zero patch tokens"));
            }
            let mut data = vec![0.0; b * d];
            for (bi, acc) in data.chunks_exact_mut(d).enumerate() {
                for tok in out.patch_features.data()[bi * n * d..(bi + 1) * n * d].chunks_exact(d) {
                    acc.iter_mut().zip(tok).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
            }
            Tensor::new(vec![b, d], data)
        }
        TargetKind::Logit => out.logits.clone().ok_or_else(|| {
            invalid("logit distillation is not applicable: the teacher has no classifier head")
        }),
    }
}

/// Student-side feature matching `kind` on a recorded forward pass.
pub fn student_feature(g: &mut Graph, out: &GraphOutput, kind: TargetKind) -> Result<Var> {
    match kind {
        TargetKind::FullMap => Ok(out.patch),
        TargetKind::Cls | TargetKind::Logit => Ok(out.cls),
        TargetKind::Gap => g.mean_axis(out.patch, 1),
    }
}

/// Mean smooth-ℓ1 between `g(s)` and the normalized target, gradient-free.
pub fn distill_loss(s: &Tensor, t: &Tensor, head: &ProjectionHead, beta: f64, norm: TeacherNorm) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    let pred = head.project(s)?;
    let target = normalize_target(t, norm)?;
    if pred.shape() != target.shape() {
        return Err(shape_err(format!(
            "projected student {:?} vs teacher target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(shape_err("empty distillation target"));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| smooth_l1_scalar(p - t, beta))
        .sum();
    Ok(total / pred.len() as f64)
}
