//! Stage runners: each reads a [`RunConfig`], does one job, and writes its
//! artifacts into an output directory. The CLI is a thin layer over these.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::diagnostics::{
    attention_distance_over, average_attention_map, collect_attention, head_similarity_over, loss_landscape,
    pattern_scores, report, AttnDistanceReport, AvgAttentionMap, DistanceUnit, HeadSimilarityReport,
    LandscapeCurve, PatternScores,
};
use crate::distill::train::{run_distillation, write_loss_csv, DistillRun};
use crate::error::{invalid, Result};
use crate::finetune::{
    finetune_run, linear_probe_run, train_from_scratch, write_accuracy_csv, FinetuneRun, ProbeResult,
};
use crate::io::{generate_toy_dataset, save_encoder, RunConfig, ToyData};
use crate::model::Encoder;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const FINETUNED_CKPT: &str = "finetuned.ckpt";
pub const CONFIG_ECHO: &str = "config.ini";

/// Progress sink; receives one line per epoch or stage.
pub type Log<'a> = &'a mut dyn FnMut(&str);

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut w = create(out, CONFIG_ECHO)?;
    w.write_all(cfg.to_ini_string().as_bytes())?;
    Ok(w.flush()?)
}

/// Dataset from `source` when given, otherwise generated from `[data]`.
pub fn load_data(cfg: &RunConfig, source: Option<&Path>) -> Result<ToyData> {
    match source {
        Some(dir) => ToyData::load(dir),
        None => generate_toy_dataset(&cfg.toy_spec()),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<ToyData> {
    let data = generate_toy_dataset(&cfg.toy_spec())?;
    fs::create_dir_all(out)?;
    data.save(out)?;
    echo_config(cfg, out)?;
    Ok(data)
}

/// Supervised teacher: `teacher.ckpt` and `teacher_accuracy.csv`.
pub fn train_teacher(cfg: &RunConfig, data: &ToyData, out: &Path, log: Log) -> Result<FinetuneRun> {
    let run = train_from_scratch(&cfg.teacher_encoder(), data, &cfg.teacher_config(), |e, tr, va| {
        log(&format!("teacher epoch {e}: train {tr:.4} val {va:.4}"))
    })?;
    fs::create_dir_all(out)?;
    save_encoder(out.join(TEACHER_CKPT), &run.model, json!({ "stage": "teacher" }))?;
    let mut w = create(out, "teacher_accuracy.csv")?;
    write_accuracy_csv(&mut w, &run.curve)?;
    w.flush()?;
    echo_config(cfg, out)?;
    Ok(run)
}

/// Feature distillation from `teacher`: `student.ckpt` and `loss.csv`.
pub fn distill(cfg: &RunConfig, teacher: &Encoder, data: &ToyData, out: &Path, log: Log) -> Result<DistillRun> {
    let run = run_distillation(teacher, &cfg.encoder(), &cfg.distill_config(), &data.train, |e, loss| {
        log(&format!("distill epoch {e}: loss {loss:.6}"))
    })?;
    fs::create_dir_all(out)?;
    let d = &cfg.distill;
    let meta = json!({
        "stage": "distill",
        "student_dpr": d.student_dpr,
        "target": d.target.as_str(),
        "teacher_norm": d.teacher_norm.as_str(),
    });
    save_encoder(out.join(STUDENT_CKPT), &run.student, meta)?;
    let mut w = create(out, "loss.csv")?;
    write_loss_csv(&mut w, &run.steps)?;
    w.flush()?;
    echo_config(cfg, out)?;
    Ok(run)
}

/// Fine-tunes `init` (or trains from scratch when `None`):
/// `finetuned.ckpt` and `accuracy.csv`.
pub fn finetune(cfg: &RunConfig, init: Option<&Encoder>, data: &ToyData, out: &Path, log: Log) -> Result<FinetuneRun> {
    let ft = cfg.finetune_config();
    let mut on_epoch = |e: usize, tr: f64, va: f64| log(&format!("finetune epoch {e}: train {tr:.4} val {va:.4}"));
    let run = match init {
        Some(enc) => finetune_run(enc, data, &ft, &mut on_epoch)?,
        None => train_from_scratch(&cfg.encoder(), data, &ft, &mut on_epoch)?,
    };
    fs::create_dir_all(out)?;
    let stage = if init.is_some() { "finetune" } else { "scratch" };
    save_encoder(out.join(FINETUNED_CKPT), &run.model, json!({ "stage": stage }))?;
    let mut w = create(out, "accuracy.csv")?;
    write_accuracy_csv(&mut w, &run.curve)?;
    w.flush()?;
    echo_config(cfg, out)?;
    Ok(run)
}

/// Linear probe on frozen GAP features: `probe.csv`.
pub fn probe(cfg: &RunConfig, enc: &Encoder, data: &ToyData, out: &Path) -> Result<ProbeResult> {
    let r = linear_probe_run(enc, data, &cfg.probe_config())?;
    let mut w = create(out, "probe.csv")?;
    writeln!(w, "split,top1")?;
    writeln!(w, "train,{}", r.train_top1)?;
    writeln!(w, "val,{}", r.val_top1)?;
    w.flush()?;
    echo_config(cfg, out)?;
    Ok(r)
}

#[derive(Clone, Debug)]
pub struct AttentionDiagnostics {
    pub distance: AttnDistanceReport,
    pub similarity: HeadSimilarityReport,
    pub maps: Vec<AvgAttentionMap>,
    pub scores: Vec<PatternScores>,
}

/// Attention diagnostics over the validation split. Writes
/// `attention_distance.csv`, `head_similarity.csv`, `attention_maps.csv`,
/// `pattern_scores.csv`, `attention_maps.svg` and one PGM per layer.
pub fn diagnose_attention(cfg: &RunConfig, enc: &Encoder, data: &ToyData, out: &Path) -> Result<AttentionDiagnostics> {
    let d = &cfg.diagnostics;
    let records = collect_attention(enc, &data.val, d.attention_images)?;
    if records.is_empty() {
        return Err(invalid("no images to analyse"));
    }
    let unit = if d.pixel_units { DistanceUnit::Pixel } else { DistanceUnit::Patch };
    let distance = attention_distance_over(&records, unit)?;
    let similarity = head_similarity_over(&records)?;
    let maps = average_attention_map(&records)?;
    let scores = maps
        .iter()
        .map(|m| pattern_scores(&m.map, m.grid, d.diagonal_band))
        .collect::<Result<Vec<_>>>()?;

    let mut w = create(out, "attention_distance.csv")?;
    report::write_attention_distance_csv(&mut w, &distance)?;
    w.flush()?;
    let mut w = create(out, "head_similarity.csv")?;
    report::write_head_similarity_csv(&mut w, &similarity)?;
    w.flush()?;
    let mut w = create(out, "attention_maps.csv")?;
    report::write_attention_maps_csv(&mut w, &maps)?;
    w.flush()?;
    let mut w = create(out, "pattern_scores.csv")?;
    report::write_pattern_scores_csv(&mut w, &scores)?;
    w.flush()?;
    fs::write(out.join("attention_maps.svg"), report::attention_svg(&maps, 4))?;
    for m in &maps {
        let mut w = create(out, &format!("attention_layer{}.pgm", m.layer))?;
        report::write_pgm(&mut w, &m.map)?;
        w.flush()?;
    }
    echo_config(cfg, out)?;
    Ok(AttentionDiagnostics { distance, similarity, maps, scores })
}

/// Loss landscape of a classifier over the validation split: `landscape.csv`.
pub fn diagnose_landscape(cfg: &RunConfig, enc: &Encoder, data: &ToyData, out: &Path) -> Result<Vec<LandscapeCurve>> {
    if enc.cfg.num_classes.is_none() {
        return Err(invalid("the loss landscape needs a checkpoint with a classifier head"));
    }
    let d = &cfg.diagnostics;
    let curves = loss_landscape(enc, &data.val, d.directions, &cfg.alphas(), d.seed)?;
    let mut w = create(out, "landscape.csv")?;
    report::write_landscape_csv(&mut w, &curves)?;
    w.flush()?;
    echo_config(cfg, out)?;
    Ok(curves)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepEntry {
    pub student_dpr: f64,
    pub final_distill_loss: f64,
    pub val_top1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// Index of the best fine-tuned accuracy; ties go to the earlier rate.
    pub best: usize,
}

impl SweepReport {
    pub fn best_rate(&self) -> f64 {
        self.entries[self.best].student_dpr
    }
}

/// Distills and fine-tunes once per rate in `distill.sweep_rates` and
/// picks the rate with the best fine-tuned validation top-1. Each rate
/// gets a `dpr_<rate>` subdirectory; `sweep.csv` summarizes.
pub fn sweep_dpr(cfg: &RunConfig, teacher: &Encoder, data: &ToyData, out: &Path, log: Log) -> Result<SweepReport> {
    let rates = cfg.distill.sweep_rates.clone();
    if rates.is_empty() {
        return Err(invalid("distill.sweep_rates is empty"));
    }
    let mut entries = Vec::with_capacity(rates.len());
    for &rate in &rates {
        let mut c = cfg.clone();
        c.distill.student_dpr = rate;
        c.distill.teacher_dpr = c.distill.teacher_dpr.min(rate);
        let dir = out.join(format!("dpr_{rate}"));
        log(&format!("sweep: student_dpr {rate}"));
        let d = distill(&c, teacher, data, &dir, log)?;
        let f = finetune(&c, Some(&d.student), data, &dir, log)?;
        entries.push(SweepEntry {
            student_dpr: rate,
            final_distill_loss: d.epoch_loss.last().copied().unwrap_or(f64::NAN),
            val_top1: f.final_val_top1(),
        });
    }
    let best = entries
        .iter()
        .enumerate()
        .fold(0, |b, (i, e)| if e.val_top1 > entries[b].val_top1 { i } else { b });
    let mut w = create(out, "sweep.csv")?;
    writeln!(w, "student_dpr,final_distill_loss,val_top1,selected")?;
    for (i, e) in entries.iter().enumerate() {
        writeln!(w, "{},{:e},{},{}", e.student_dpr, e.final_distill_loss, e.val_top1, u8::from(i == best))?;
    }
    w.flush()?;
    echo_config(cfg, out)?;
    Ok(SweepReport { entries, best })
}

/// Every artifact of a full run, relative to its output directory.
#[derive(Clone, Debug, Default)]
pub struct PipelineSummary {
    pub teacher_val_top1: f64,
    pub distilled_val_top1: f64,
    pub scratch_val_top1: f64,
    pub probe_val_top1: f64,
    pub files: Vec<PathBuf>,
}

/// Data, teacher, distillation, fine-tuning of the distilled and a
/// from-scratch student, probe, and diagnostics, each in its own
/// subdirectory of `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, log: Log) -> Result<PipelineSummary> {
    let data = gen_data(cfg, &out.join("data"))?;
    let teacher = train_teacher(cfg, &data, &out.join("teacher"), log)?;
    let student = distill(cfg, &teacher.model, &data, &out.join("distill"), log)?;
    let distilled = finetune(cfg, Some(&student.student), &data, &out.join("finetune"), log)?;
    let scratch = finetune(cfg, None, &data, &out.join("scratch"), log)?;
    let probed = probe(cfg, &student.student, &data, &out.join("probe"))?;
    diagnose_attention(cfg, &teacher.model, &data, &out.join("diag/teacher"))?;
    diagnose_attention(cfg, &student.student, &data, &out.join("diag/student"))?;
    diagnose_landscape(cfg, &distilled.model, &data, &out.join("diag/finetuned"))?;
    Ok(PipelineSummary {
        teacher_val_top1: teacher.final_val_top1(),
        distilled_val_top1: distilled.final_val_top1(),
        scratch_val_top1: scratch.final_val_top1(),
        probe_val_top1: probed.val_top1,
        files: list_files(out)?,
    })
}

/// Files under `root`, relative and sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(rel) = path.strip_prefix(root) {
                out.push(rel.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}
