use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{extract_target, normalize_target, student_feature, DistillConfig, ProjectionHead, TargetKind};
use crate::augment::shared_view_batch;
use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::io::data::Dataset;
use crate::model::{Encoder, EncoderConfig, ForwardOptions};
use crate::optim::{clip_grad_norm, LrSchedule, Optimizer};
use crate::params::ParamVars;
use crate::tensor::Tensor;

/// Optimizer state for the student and the projection head. The teacher
/// has none.
pub struct DistillState {
    pub student: Optimizer,
    pub head: Optimizer,
}

impl DistillState {
    pub fn new(student: &Encoder, head: &ProjectionHead, cfg: &DistillConfig) -> Self {
        Self {
            student: Optimizer::new(&student.params, cfg.optimizer),
            head: Optimizer::new(&head.params, cfg.optimizer),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub struct DistillRun {
    /// Student encoder without classifier; the projection head is kept
    /// separately and is not part of the student checkpoint.
    pub student: Encoder,
    pub head: ProjectionHead,
    pub steps: Vec<StepRecord>,
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Normalized teacher target for `view`, computed without gradients.
pub fn teacher_target<R: Rng + ?Sized>(
    teacher: &Encoder,
    view: &Tensor,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let opts = if cfg.teacher_dpr > 0.0 {
        ForwardOptions::train(cfg.teacher_dpr)
    } else {
        ForwardOptions::eval()
    };
    let out = teacher.forward(view, opts, rng)?;
    normalize_target(&extract_target(&out, cfg.target)?, cfg.effective_norm())
}

/// Records the student forward pass, projection and loss on `g`.
#[allow(clippy::too_many_arguments)]
pub fn distill_objective<R: Rng + ?Sized>(
    g: &mut Graph,
    student: &Encoder,
    student_vars: &ParamVars,
    head: &ProjectionHead,
    head_vars: &ParamVars,
    view: &Tensor,
    target: &Tensor,
    cfg: &DistillConfig,
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<Var> {
    let out = student.forward_graph(g, student_vars, view, opts, rng)?;
    let s = student_feature(g, &out, cfg.target)?;
    let pred = head.apply(g, head_vars, s)?;
    g.smooth_l1(pred, target, cfg.beta)
}

fn dump(student: &Encoder, head: &ProjectionHead) -> String {
    student
        .params
        .iter()
        .chain(head.params.iter())
        .map(|(n, t)| format!("{n}={:.4e}", t.norm_l2()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One optimization step on a shared view: frozen teacher forward, student
/// forward in train mode, backward through student and head, global
/// clipping, AdamW at rate `lr`. Returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<R: Rng + ?Sized>(
    student: &mut Encoder,
    teacher: &Encoder,
    head: &mut ProjectionHead,
    view: &Tensor,
    cfg: &DistillConfig,
    state: &mut DistillState,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let target = teacher_target(teacher, view, cfg, rng)?;
    let mut g = Graph::new();
    let sv = student.params.load(&mut g, true);
    let hv = head.params.load(&mut g, true);
    let opts = ForwardOptions::train(cfg.student_dpr);
    let loss = distill_objective(&mut g, student, &sv, head, &hv, view, &target, cfg, opts, rng)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "distillation loss {value} at lr {lr:e}; parameter norms: {}",
            dump(student, head)
        )));
    }
    let grads = g.backward(loss)?;
    let mut gs = student.params.collect_grads(&sv, &grads)?;
    let mut gh = head.params.collect_grads(&hv, &grads)?;
    clip_grad_norm(
        gs.iter_mut().chain(gh.iter_mut()).map(|(_, t)| t),
        cfg.clip,
    )?;
    state.student.step(&mut student.params, &gs, lr)?;
    state.head.step(&mut head.params, &gh, lr)?;
    Ok(value)
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Schedule over `epochs * steps_per_epoch` updates. The warmup is capped
/// one step short of the end so very short runs stay valid.
pub(crate) fn epoch_schedule(
    peak: f64,
    min: f64,
    warmup_epochs: usize,
    epochs: usize,
    steps_per_epoch: usize,
) -> Result<LrSchedule> {
    let total = (epochs * steps_per_epoch) as u64;
    let warmup = ((warmup_epochs * steps_per_epoch) as u64).min(total.saturating_sub(1));
    LrSchedule::new(peak, min, warmup, total)
}

/// Distills `teacher` into a freshly initialized student of architecture
/// `student_cfg` over `data`. `on_epoch` sees each epoch's mean loss.
pub fn run_distillation(
    teacher: &Encoder,
    student_cfg: &EncoderConfig,
    cfg: &DistillConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<DistillRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("distillation needs a nonempty dataset"));
    }
    let student_cfg = student_cfg.clone().with_classes(None);
    let t = &teacher.cfg;
    if (student_cfg.image_size, student_cfg.in_channels) != (t.image_size, t.in_channels) {
        return Err(shape_err("student and teacher disagree on the input format"));
    }
    let target_dim = match cfg.target {
        TargetKind::Logit => t.num_classes.ok_or_else(|| {
            invalid("logit distillation is not applicable: the teacher has no classifier head")
        })?,
        _ => t.dim,
    };
    if cfg.target == TargetKind::FullMap && student_cfg.num_patches() != t.num_patches() {
        return Err(shape_err("full-map distillation needs matching patch grids"));
    }

    let mut init_rng = seeded(cfg.seed, 0);
    let mut shuffle_rng = seeded(cfg.seed, 1);
    let mut aug_rng = seeded(cfg.seed, 2);
    let mut path_rng = seeded(cfg.seed, 3);
    let mut student = Encoder::init(student_cfg.clone(), &mut init_rng)?;
    let mut head = ProjectionHead::new(student_cfg.dim, target_dim, &mut init_rng)?;
    let mut run = DistillRun {
        student: student.clone(),
        head: head.clone(),
        steps: Vec::new(),
        epoch_loss: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok(run);
    }

    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let sched = epoch_schedule(cfg.optimizer.lr, cfg.min_lr, cfg.warmup_epochs, cfg.epochs, per_epoch)?;
    let mut state = DistillState::new(&student, &head, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = sched.lr_at(step)?;
            let (images, _) = data.batch(chunk)?;
            let (view, _) = shared_view_batch(&images, &cfg.augment, &mut aug_rng)?;
            let loss = distill_step(
                &mut student,
                teacher,
                &mut head,
                &view,
                cfg,
                &mut state,
                lr,
                &mut path_rng,
            )?;
            sum += loss;
            run.steps.push(StepRecord { epoch, step, lr, loss });
        }
        let mean = sum / per_epoch as f64;
        run.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    run.student = student;
    run.head = head;
    Ok(run)
}

/// Loss curve as CSV with columns `epoch,step,lr,loss`.
pub fn write_loss_csv<W: Write>(mut w: W, steps: &[StepRecord]) -> Result<()> {
    writeln!(w, "epoch,step,lr,loss")?;
    for s in steps {
        writeln!(w, "{},{},{:e},{:e}", s.epoch, s.step, s.lr, s.loss)?;
    }
    Ok(())
}
