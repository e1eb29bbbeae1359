//! Acceptance criteria. Each test prints one `ACCEPT PASS|FAIL` line with
//! its measurements before asserting.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use fd_core::autograd::GATHER_ZERO;
use fd_core::diagnostics::{
    attention_distance, collect_attention, filter_norms, filter_normalized_direction, head_similarity_over,
    loss_landscape,
};
use fd_core::distill::{
    distill_loss, distill_objective, extract_target, normalize_target, run_distillation, whiten,
    DistillConfig, ProjectionHead, TargetKind, TeacherNorm,
};
use fd_core::finetune::{evaluate, finetune_run, train_from_scratch, FinetuneConfig};
use fd_core::gradcheck::grad_check;
use fd_core::io::checkpoint::encode;
use fd_core::io::{generate_toy_dataset, RunConfig, ToyData, ToySpec};
use fd_core::model::{AttentionRecord, Encoder, EncoderConfig, ForwardOptions, PosMode};
use fd_core::ops::{smooth_l1_grad_scalar, smooth_l1_scalar, softmax_rows};
use fd_core::pipeline::{list_files, run_pipeline};
use fd_core::{Graph, Mode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let mut out = std::io::stdout().lock();
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "ACCEPT {verdict} {name} ({:.1}s): {detail}", elapsed.as_secs_f64());
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn small_spec(per_class: usize, seed: u64) -> ToySpec {
    ToySpec {
        train_per_class: per_class,
        val_per_class: per_class / 2,
        seed,
        ..ToySpec::default()
    }
}

fn small_encoder(pos_mode: PosMode, classes: Option<usize>, depth: usize, dim: usize) -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        in_channels: 3,
        depth,
        dim,
        heads: 4,
        mlp_ratio: 2,
        pos_mode,
        drop_path_rate: 0.0,
        num_classes: classes,
    }
}

#[test]
fn smooth_l1_unit_suite() {
    let t = Instant::now();
    let beta = 2.0;
    let want = [(0.0, 0.0), (1.0, 0.25), (2.0, 1.0), (5.0, 4.0)];
    let value_err = want
        .iter()
        .flat_map(|&(d, v)| [smooth_l1_scalar(d, beta) - v, smooth_l1_scalar(-d, beta) - v])
        .fold(0.0f64, |m, e| m.max(e.abs()));

    // graph op on the same residuals
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(want.iter().map(|w| w.0).collect()), true);
    let loss = g.smooth_l1(x, &Tensor::zeros(&[4]), beta).unwrap();
    let graph_mean = g.value(loss).item();
    let graph_err = (graph_mean - (0.0 + 0.25 + 1.0 + 4.0) / 4.0).abs();

    let delta = 1e-12;
    let jump = [beta, -beta]
        .iter()
        .map(|&b: &f64| {
            let inner = smooth_l1_grad_scalar(b - b.signum() * delta, beta);
            let outer = smooth_l1_grad_scalar(b + b.signum() * delta, beta);
            (inner - outer).abs()
        })
        .fold(0.0f64, f64::max);
    let max_grad = (-2000..=2000)
        .map(|i| smooth_l1_grad_scalar(i as f64 * 0.01, beta).abs())
        .fold(0.0f64, f64::max);

    let pass = value_err < 1e-12 && graph_err < 1e-12 && jump < 1e-9 && max_grad <= 1.0 && t.elapsed().as_secs_f64() < 1.0;
    report(
        "smooth-l1 unit suite",
        pass,
        t.elapsed(),
        &format!("value err {value_err:.1e}, graph err {graph_err:.1e}, derivative jump at |d|=beta {jump:.1e}, max |grad| {max_grad}"),
    );
}

#[test]
fn whitening_suite() {
    let t = Instant::now();
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[2, 16, 32], 5.0).map(|v| v + 3.0);
    let w = whiten(&x).unwrap();
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for row in w.data().chunks(32) {
        let m = row.iter().sum::<f64>() / 32.0;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
        mean_err = mean_err.max(m.abs());
        var_err = var_err.max((v - 1.0).abs());
    }
    let idem = whiten(&w).unwrap().max_abs_diff(&w);
    let affine = whiten(&x.map(|v| 7.5 * v - 4.0)).unwrap().max_abs_diff(&w);

    // end to end: student and teacher encoders on toy images
    let data = generate_toy_dataset(&small_spec(4, 0)).unwrap();
    let (images, _) = data.train.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let teacher = Encoder::init(small_encoder(PosMode::Ape, None, 2, 32), &mut rng(1)).unwrap();
    let student = Encoder::init(small_encoder(PosMode::SharedRpb, None, 2, 24), &mut rng(2)).unwrap();
    let tf = extract_target(&teacher.forward(&images, ForwardOptions::eval(), &mut rng(0)).unwrap(), TargetKind::FullMap)
        .unwrap();
    let sf = student.forward(&images, ForwardOptions::eval(), &mut rng(0)).unwrap().patch_features;
    let head = ProjectionHead::new(24, 32, &mut rng(4)).unwrap();
    let ratio = |norm: TeacherNorm| {
        let losses: Vec<f64> = [0.01, 1.0, 100.0]
            .iter()
            .map(|&s| distill_loss(&sf, &tf.map(|v| v * s), &head, 2.0, norm).unwrap())
            .collect();
        let max = losses.iter().cloned().fold(f64::MIN, f64::max);
        let min = losses.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    };
    let (rw, rn) = (ratio(TeacherNorm::Whiten), ratio(TeacherNorm::None));

    let pass = mean_err < 1e-9
        && var_err < 1e-6
        && idem < 1e-6
        && affine < 1e-6
        && rw < 1.01
        && rn >= 1.01
        && t.elapsed().as_secs_f64() < 1.0;
    report(
        "whitening suite",
        pass,
        t.elapsed(),
        &format!(
            "mean {mean_err:.1e}, |var-1| {var_err:.1e}, idempotence {idem:.1e}, affine {affine:.1e}, \
             loss ratio over teacher scale {{0.01,1,100}}: whiten {rw:.6}, none {rn:.3}"
        ),
    );
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> fd_core::Result<Var> {
    let w = rand_tensor(&mut rng(seed ^ 0xabcdef), g.shape(y), 2.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, Var, u64) -> fd_core::Result<Var>>;

fn op_suite() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    let index: Rc<[usize]> = vec![0, 3, GATHER_ZERO, 3, 1, 2].into();
    let c = |g: &mut Graph, seed: u64, shape: &[usize]| g.constant(rand_tensor(&mut rng(seed), shape, 2.0));
    vec![
        ("gelu", vec![3, 5], Box::new(|g, x, _| Ok(g.gelu(x)))),
        ("scale", vec![4], Box::new(|g, x, _| Ok(g.scale(x, -1.7)))),
        ("softmax", vec![3, 4], Box::new(|g, x, _| g.softmax(x))),
        ("reshape", vec![2, 6], Box::new(|g, x, _| g.reshape(x, &[3, 4]))),
        ("permute", vec![2, 3, 4], Box::new(|g, x, _| g.permute(x, &[1, 2, 0]))),
        ("narrow", vec![2, 5, 3], Box::new(|g, x, _| g.narrow(x, 1, 1, 3))),
        ("mean_axis", vec![2, 5, 3], Box::new(|g, x, _| g.mean_axis(x, 1))),
        ("scale_rows", vec![3, 4], Box::new(|g, x, _| g.scale_rows(x, vec![0.0, 2.0, 1.25]))),
        ("sum_squares", vec![5], Box::new(|g, x, _| Ok(g.sum_squares(x)))),
        ("mul", vec![5], Box::new(move |g, x, s| { let y = c(g, s + 9, &[5]); g.mul(x, y) })),
        ("add", vec![5], Box::new(move |g, x, s| { let y = c(g, s + 8, &[5]); g.add(x, y) })),
        ("layer_norm", vec![4, 6], Box::new(|g, x, _| g.layer_norm(x, None, 1e-6))),
        ("layer_norm_affine", vec![3, 5], Box::new(move |g, x, s| {
            let (a, b) = (c(g, s + 100, &[5]), c(g, s + 101, &[5]));
            g.layer_norm(x, Some((a, b)), 1e-6)
        })),
        ("layer_norm_gamma", vec![5], Box::new(move |g, gamma, s| {
            let (x, b) = (c(g, s + 200, &[3, 5]), c(g, s + 201, &[5]));
            g.layer_norm(x, Some((gamma, b)), 1e-6)
        })),
        ("matmul_lhs", vec![2, 3, 4], Box::new(move |g, x, s| { let w = c(g, s + 1, &[4, 5]); g.matmul(x, w) })),
        ("matmul_rhs", vec![4, 5], Box::new(move |g, w, s| { let x = c(g, s + 2, &[3, 4]); g.matmul(x, w) })),
        ("linear_bias", vec![5], Box::new(move |g, b, s| {
            let (x, w) = (c(g, s + 3, &[2, 4]), c(g, s + 4, &[4, 5]));
            g.linear(x, w, Some(b))
        })),
        ("add_broadcast", vec![5], Box::new(move |g, b, s| { let x = c(g, s + 5, &[2, 3, 5]); g.add_broadcast(x, b) })),
        ("bmm_lhs", vec![2, 3, 4], Box::new(move |g, a, s| { let b = c(g, s + 6, &[2, 4, 5]); g.bmm(a, b, false) })),
        ("bmm_rhs_t", vec![2, 5, 4], Box::new(move |g, b, s| { let a = c(g, s + 7, &[2, 3, 4]); g.bmm(a, b, true) })),
        ("gather", vec![4], Box::new(move |g, x, _| g.gather(x, index.clone(), &[2, 3]))),
        ("prepend_token", vec![2, 3, 4], Box::new(move |g, x, s| { let t = c(g, s + 10, &[4]); g.prepend_token(x, t) })),
        ("prepend_token_tok", vec![4], Box::new(move |g, t, s| { let x = c(g, s + 11, &[2, 3, 4]); g.prepend_token(x, t) })),
        ("smooth_l1", vec![3, 4], Box::new(move |g, x, s| {
            let target = rand_tensor(&mut rng(s + 12), &[3, 4], 4.0);
            g.smooth_l1(x, &target, 2.0)
        })),
        ("cross_entropy", vec![3, 4], Box::new(|g, x, _| g.cross_entropy(x, &[0, 3, 1], 0.1))),
    ]
}

#[test]
fn gradient_checks() {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    let mut count = 0;
    for (name, shape, f) in op_suite() {
        for seed in 0..5 {
            let x = rand_tensor(&mut rng(seed), &shape, 2.0);
            let e = grad_check(|g, x| { let y = f(g, x, seed)?; weighted_sum(g, y, seed) }, &x, H).unwrap();
            if e > worst.0 {
                worst = (e, name);
            }
            count += 1;
        }
    }

    // full distillation objective on a 2-layer, dim-16 student
    let student = Encoder::init(EncoderConfig { mlp_ratio: 2, ..small_encoder(PosMode::SharedRpb, None, 2, 16) }, &mut rng(5))
        .unwrap();
    let teacher = Encoder::init(small_encoder(PosMode::Ape, None, 2, 16), &mut rng(6)).unwrap();
    let head = ProjectionHead::new(16, 16, &mut rng(7)).unwrap();
    let images = rand_tensor(&mut rng(8), &[2, 3, 16, 16], 1.0);
    let mut distill_errs = Vec::new();
    for (dpr, norm) in [(0.0, TeacherNorm::Whiten), (0.3, TeacherNorm::Whiten), (0.0, TeacherNorm::None)] {
        let cfg = DistillConfig { student_dpr: dpr, teacher_norm: norm, ..DistillConfig::default() };
        let target = normalize_target(
            &extract_target(&teacher.forward(&images, ForwardOptions::eval(), &mut rng(0)).unwrap(), TargetKind::FullMap)
                .unwrap(),
            norm,
        )
        .unwrap();
        let opts = if dpr > 0.0 { ForwardOptions::train(dpr) } else { ForwardOptions { mode: Mode::Eval, ..ForwardOptions::eval() } };
        let mut flat = student.params.flatten();
        flat.extend(head.params.flatten());
        let n_student = student.params.numel();
        let e = grad_check(
            |g, x| {
                let s = g.narrow(x, 0, 0, n_student)?;
                let h = g.narrow(x, 0, n_student, g.shape(x)[0] - n_student)?;
                let sv = student.params.split_flat(g, s)?;
                let hv = head.params.split_flat(g, h)?;
                distill_objective(g, &student, &sv, &head, &hv, &images, &target, &cfg, opts, &mut rng(9))
            },
            &Tensor::from_vec(flat),
            H,
        )
        .unwrap();
        distill_errs.push(e);
    }
    let worst_distill = distill_errs.iter().cloned().fold(0.0, f64::max);
    let pass = worst.0 < TOL && worst_distill < TOL && t.elapsed().as_secs() < 120;
    report(
        "gradient checks",
        pass,
        t.elapsed(),
        &format!(
            "{count} op checks, worst rel err {:.2e} ({}); distill objective (dpr 0 / 0.3 whiten, none) {:?}",
            worst.0, worst.1, distill_errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    );
}

fn random_attention(g: usize, heads: usize, seed: u64) -> AttentionRecord {
    let t = g * g + 1;
    let x = rand_tensor(&mut rng(seed), &[heads * t, t], 4.0);
    let probs = softmax_rows(&x).unwrap().reshape(&[1, heads, t, t]).unwrap();
    AttentionRecord { probs, grid: (g, g), patch_size: 4 }
}

fn brute_force_distance(r: &AttentionRecord, head: usize) -> f64 {
    let (g, _) = r.grid;
    let t = g * g + 1;
    let map = r.map(0, head);
    let mut sum = 0.0;
    for qy in 0..g {
        for qx in 0..g {
            let q = 1 + qy * g + qx;
            let mut mass = 0.0;
            let mut acc = 0.0;
            for ky in 0..g {
                for kx in 0..g {
                    let p = map[q * t + 1 + ky * g + kx];
                    let dy = qy as f64 - ky as f64;
                    let dx = qx as f64 - kx as f64;
                    acc += p * (dy * dy + dx * dx).sqrt();
                    mass += p;
                }
            }
            sum += acc / mass;
        }
    }
    sum / (g * g) as f64
}

#[test]
fn attention_distance_oracle() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for g in [2, 3, 4] {
        for seed in 0..20 {
            let r = random_attention(g, 3, seed);
            let rep = attention_distance(&r).unwrap();
            for h in 0..3 {
                worst = worst.max((rep.get(0, h) - brute_force_distance(&r, h)).abs());
            }
        }
    }
    let uniform = AttentionRecord { probs: Tensor::full(&[1, 1, 5, 5], 0.2), grid: (2, 2), patch_size: 4 };
    let u = attention_distance(&uniform).unwrap().get(0, 0);
    let pass = worst < 1e-9 && (u - 0.853553).abs() < 1e-6 && t.elapsed().as_secs() < 10;
    report(
        "attention-distance oracle",
        pass,
        t.elapsed(),
        &format!("max |vectorized - brute force| {worst:.1e} over 2x2/3x3/4x4 x 20 seeds; uniform 2x2 {u:.6}"),
    );
}

fn zero_qk(enc: &mut Encoder) {
    let d = enc.cfg.dim;
    for l in 0..enc.cfg.depth {
        let w = enc.params.get_mut(&format!("blocks.{l}.attn.qkv.weight")).unwrap();
        for row in w.data_mut().chunks_exact_mut(3 * d) {
            row[..2 * d].fill(0.0);
        }
        enc.params.get_mut(&format!("blocks.{l}.attn.qkv.bias")).unwrap().data_mut()[..2 * d].fill(0.0);
    }
}

fn attention_logits(enc: &Encoder, images: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars = enc.params.load(&mut g, false);
    let out = enc.forward_graph(&mut g, &vars, images, ForwardOptions::eval().capturing(), &mut rng(0)).unwrap();
    out.attention_logits.unwrap()
}

#[test]
fn shared_rpb_census() {
    let t = Instant::now();
    let depth = 4;
    let shared = Encoder::init(small_encoder(PosMode::SharedRpb, None, depth, 32), &mut rng(0)).unwrap();
    let separate = Encoder::init(small_encoder(PosMode::Rpb, None, depth, 32), &mut rng(0)).unwrap();
    let (ns, nr) = (shared.rpb_param_count(), separate.rpb_param_count());
    let census_ok = ns * depth == nr && ns > 0;

    // With q and k zeroed, every attention logit is the position bias, so
    // a table perturbation must move every layer's logits the same way.
    let mut enc = shared.clone();
    zero_qk(&mut enc);
    let images = rand_tensor(&mut rng(1), &[2, 3, 16, 16], 1.0);
    let before = attention_logits(&enc, &images);
    let noise = rand_tensor(&mut rng(2), enc.params.get("rel_pos.table").unwrap().shape(), 0.5);
    let table = enc.params.get_mut("rel_pos.table").unwrap();
    table.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    let after = attention_logits(&enc, &images);
    let deltas: Vec<Vec<f64>> = before
        .iter()
        .zip(&after)
        .map(|(b, a)| a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())
        .collect();
    let spread = deltas[1..]
        .iter()
        .flat_map(|d| d.iter().zip(&deltas[0]).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    let moved = deltas[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // unshared control: perturbing layer 0's table leaves other layers alone
    let mut ctl = separate.clone();
    zero_qk(&mut ctl);
    let base = attention_logits(&ctl, &images);
    let t0 = ctl.params.get_mut("blocks.0.rel_pos.table").unwrap();
    t0.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    let moved_ctl = attention_logits(&ctl, &images);
    let others_fixed = (1..depth).all(|l| moved_ctl[l].bit_eq(&base[l])) && !moved_ctl[0].bit_eq(&base[0]);

    let pass = census_ok && spread < 1e-12 && moved > 1e-3 && others_fixed && t.elapsed().as_secs() < 5;
    report(
        "shared-RPB census",
        pass,
        t.elapsed(),
        &format!(
            "shared {ns} vs per-layer {nr} bias parameters (depth {depth}); logit change spread across layers {spread:.1e}, \
             magnitude {moved:.3}; unshared control isolated: {others_fixed}"
        ),
    );
}

#[test]
fn frozen_teacher_and_landscape_restore() {
    let t = Instant::now();
    let data = generate_toy_dataset(&small_spec(8, 1)).unwrap();
    let teacher = Encoder::init(small_encoder(PosMode::Ape, Some(4), 2, 32), &mut rng(3)).unwrap();
    let before = encode(&teacher.params, &serde_json::Value::Null).unwrap();
    let frozen = teacher.clone();
    let cfg = DistillConfig { epochs: 2, batch_size: 16, teacher_dpr: 0.1, student_dpr: 0.1, ..DistillConfig::default() };
    let run = run_distillation(&teacher, &small_encoder(PosMode::SharedRpb, None, 2, 32), &cfg, &data.train, |_, _| {})
        .unwrap();
    let teacher_same = teacher.params.bit_eq(&frozen.params)
        && encode(&teacher.params, &serde_json::Value::Null).unwrap() == before
        && !run.student.params.bit_eq(&Encoder::init(run.student.cfg.clone(), &mut rng(99)).unwrap().params);

    let ckpt = encode(&teacher.params, &serde_json::Value::Null).unwrap();
    let curves = loss_landscape(&teacher, &data.val, 2, &[-0.5, 0.0, 0.5], 4).unwrap();
    let landscape_same = encode(&teacher.params, &serde_json::Value::Null).unwrap() == ckpt
        && teacher.params.bit_eq(&frozen.params)
        && curves.len() == 2;

    let pass = teacher_same && landscape_same && t.elapsed().as_secs() < 60;
    report(
        "frozen teacher and landscape restore",
        pass,
        t.elapsed(),
        &format!("teacher bytes unchanged after distillation: {teacher_same}; checkpoint bytes unchanged after landscape probing: {landscape_same}"),
    );
}

#[test]
fn landscape_sanity() {
    let t = Instant::now();
    let data = generate_toy_dataset(&small_spec(8, 2)).unwrap();
    let cfg = FinetuneConfig { epochs: 2, batch_size: 16, warmup_epochs: 0, ..FinetuneConfig::default() };
    let model = train_from_scratch(&small_encoder(PosMode::SharedRpb, None, 2, 32), &data, &cfg, |_, _, _| {})
        .unwrap()
        .model;
    let base = evaluate(&model, &data.val).unwrap();
    let alphas = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let curves = loss_landscape(&model, &data.val, 5, &alphas, 0).unwrap();
    let zero_exact = curves.len() == 5
        && curves.iter().all(|c| {
            let s = c.samples.iter().find(|s| s.alpha == 0.0).unwrap();
            s.loss == base.loss && s.top1 == base.top1
        });
    let moved = curves.iter().any(|c| c.samples[0].loss != base.loss);

    let mut worst = 0.0f64;
    let mut r = rng(11);
    for _ in 0..5 {
        let dir = filter_normalized_direction(&model.params, &mut r).unwrap();
        for (name, p) in model.params.iter() {
            let d = dir.get(name).unwrap();
            for (a, b) in filter_norms(name, p).iter().zip(filter_norms(name, d)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let pass = zero_exact && moved && worst < 1e-9;
    report(
        "landscape sanity",
        pass,
        t.elapsed(),
        &format!("alpha=0 equals unperturbed evaluation on all 5 directions: {zero_exact}; max filter-norm gap {worst:.1e}"),
    );
}

fn desk_config() -> RunConfig {
    RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg")).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_layer_similarity(enc: &Encoder, data: &ToyData, limit: usize) -> f64 {
    let records = collect_attention(enc, &data.val, limit).unwrap();
    *head_similarity_over(&records).unwrap().per_layer.last().unwrap()
}

#[test]
fn desk_scale_pipeline() {
    let t = Instant::now();
    let cfg = desk_config();
    let data = generate_toy_dataset(&cfg.toy_spec()).unwrap();
    let teacher = train_from_scratch(&cfg.teacher_encoder(), &data, &cfg.teacher_config(), |_, _, _| {}).unwrap();
    let teacher_top1 = teacher.final_val_top1();

    let dcfg = cfg.distill_config();
    let run = run_distillation(&teacher.model, &cfg.encoder(), &dcfg, &data.train, |_, _| {}).unwrap();

    let (mut distilled, mut scratch) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let ft = FinetuneConfig { seed, ..cfg.finetune_config() };
        distilled.push(finetune_run(&run.student, &data, &ft, |_, _, _| {}).unwrap().final_val_top1());
        scratch.push(train_from_scratch(&cfg.encoder(), &data, &ft, |_, _, _| {}).unwrap().final_val_top1());
    }
    let limit = cfg.diagnostics.attention_images;
    let sim_teacher = final_layer_similarity(&teacher.model, &data, limit);
    let sim_student = final_layer_similarity(&run.student, &data, limit);

    let (md, ms) = (mean(&distilled), mean(&scratch));
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let pass = teacher_top1 > 0.9 && dcfg.epochs == 100 && md >= ms && sim_student <= sim_teacher && minutes < 30.0;
    report(
        "desk-scale FD pipeline",
        pass,
        t.elapsed(),
        &format!(
            "teacher top-1 {teacher_top1:.4}; distilled {} epochs (final loss {:.4}); fine-tuned top-1 distilled {distilled:?} \
             mean {md:.4} vs scratch {scratch:?} mean {ms:.4}; final-layer head similarity student {sim_student:.4} vs \
             teacher {sim_teacher:.4}; {minutes:.1} min",
            dcfg.epochs,
            run.epoch_loss.last().copied().unwrap_or(f64::NAN),
        ),
    );
}

fn tiny_pipeline_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "model.depth=2",
        "model.dim=16",
        "model.teacher_epochs=2",
        "model.teacher_warmup_epochs=1",
        "distill.epochs=2",
        "distill.warmup_epochs=1",
        "distill.batch_size=16",
        "finetune.epochs=2",
        "finetune.warmup_epochs=1",
        "finetune.batch_size=16",
        "finetune.probe_epochs=3",
        "data.train_per_class=8",
        "data.val_per_class=4",
        "diagnostics.directions=2",
        "diagnostics.alpha_steps=3",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg
}

#[test]
fn determinism() {
    let t = Instant::now();
    let cfg = tiny_pipeline_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&cfg, a.path(), &mut |_| {}).unwrap();
    run_pipeline(&cfg, b.path(), &mut |_| {}).unwrap();
    let (fa, fb) = (list_files(a.path()).unwrap(), list_files(b.path()).unwrap());
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap_or_default())
        .map(|f| f.display().to_string())
        .collect();
    let ckpts = fa.iter().filter(|f| f.extension().is_some_and(|e| e == "ckpt")).count();
    let csvs = fa.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")).count();
    let pass = fa == fb && differing.is_empty() && ckpts >= 4 && csvs >= 8;
    report(
        "determinism",
        pass,
        t.elapsed(),
        &format!("{} files ({ckpts} checkpoints, {csvs} CSVs) compared across two full runs; differing: {differing:?}", fa.len()),
    );
}
