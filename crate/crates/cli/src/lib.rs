//! `fd` command-line front end.
//!
//! Every subcommand loads a [`RunConfig`] (defaults, then `--config`, then
//! `--seed`, then each `--set section.key=value` in order), runs one stage
//! from [`fd_core::pipeline`], and writes its artifacts under `--out`.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! stage fails at runtime.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fd_core::io::{load_encoder, RunConfig};
use fd_core::model::Encoder;
use fd_core::pipeline;
use fd_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "fd", version, about = "Feature distillation for small vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// INI run configuration; unset keys keep their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every stage (model, distill, finetune, diagnostics).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// `toy` to generate from `[data]`, or a directory written by `gen-data`.
    #[arg(long, value_name = "toy|DIR", default_value = "toy")]
    pub data: String,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the supervised teacher.
    TrainTeacher(Common),
    /// Distill a fresh student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
    },
    /// Fine-tune a checkpoint, or train from scratch without `--ckpt`.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
    },
    /// Linear probe on frozen GAP features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
    },
    /// Attention distance, head similarity and average attention maps.
    DiagnoseAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
    },
    /// Loss along filter-normalized random directions.
    DiagnoseLandscape {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
    },
    /// Render the toy dataset to disk.
    GenData(Common),
    /// Distill and fine-tune once per `distill.sweep_rates` entry and pick the best rate.
    SweepDpr {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::TrainTeacher(c) | Command::GenData(c) => c,
            Command::Distill { common, .. }
            | Command::Finetune { common, .. }
            | Command::Probe { common, .. }
            | Command::DiagnoseAttn { common, .. }
            | Command::DiagnoseLandscape { common, .. }
            | Command::SweepDpr { common, .. } => common,
        }
    }
}

/// Failure of a dispatched command, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config_failure(e: Error) -> Failure {
    match e {
        Error::Io(_) => Failure::Runtime(e.to_string()),
        e => Failure::Usage(e.to_string()),
    }
}

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
pub fn resolve_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Runtime(format!("cannot read {}: {io}", path.display())),
            e => Failure::Usage(format!("{}: {e}", path.display())),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    for spec in &c.set {
        cfg.apply_override(spec).map_err(config_failure)?;
    }
    cfg.distill_config().validate().map_err(config_failure)?;
    cfg.finetune_config().validate().map_err(config_failure)?;
    cfg.toy_spec().validate().map_err(config_failure)?;
    Ok(cfg)
}

fn data_source(c: &Common) -> Option<&Path> {
    (c.data != "toy").then(|| Path::new(&c.data))
}

fn load(path: &Path) -> Result<Encoder, Failure> {
    load_encoder(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Runs a parsed command; progress and summaries go to `err`.
pub fn execute(cmd: &Command, err: &mut dyn Write) -> Result<(), Failure> {
    let c = cmd.common();
    let cfg = resolve_config(c)?;
    let out = c.out.as_path();
    let quiet = c.quiet;
    let mut log = |line: &str| {
        if !quiet {
            let _ = writeln!(err, "{line}");
        }
    };
    if let Command::GenData(_) = cmd {
        let d = pipeline::gen_data(&cfg, out).map_err(runtime)?;
        log(&format!("wrote {} train / {} val images to {}", d.train.len(), d.val.len(), out.display()));
        return Ok(());
    }
    let data = pipeline::load_data(&cfg, data_source(c)).map_err(runtime)?;
    match cmd {
        Command::TrainTeacher(_) => {
            let r = pipeline::train_teacher(&cfg, &data, out, &mut log).map_err(runtime)?;
            log(&format!("teacher val top-1 {:.4}", r.final_val_top1()));
        }
        Command::Distill { teacher, .. } => {
            let t = load(teacher)?;
            let r = pipeline::distill(&cfg, &t, &data, out, &mut log).map_err(runtime)?;
            if let Some(l) = r.epoch_loss.last() {
                log(&format!("final distill loss {l:.6}"));
            }
        }
        Command::Finetune { ckpt, .. } => {
            let init = ckpt.as_deref().map(load).transpose()?;
            let r = pipeline::finetune(&cfg, init.as_ref(), &data, out, &mut log).map_err(runtime)?;
            log(&format!("val top-1 {:.4}", r.final_val_top1()));
        }
        Command::Probe { ckpt, .. } => {
            let r = pipeline::probe(&cfg, &load(ckpt)?, &data, out).map_err(runtime)?;
            log(&format!("probe train top-1 {:.4} val top-1 {:.4}", r.train_top1, r.val_top1));
        }
        Command::DiagnoseAttn { ckpt, .. } => {
            let r = pipeline::diagnose_attention(&cfg, &load(ckpt)?, &data, out).map_err(runtime)?;
            for (l, s) in r.similarity.per_layer.iter().enumerate() {
                log(&format!(
                    "layer {l}: distance {:.4} head similarity {s:.4}",
                    r.distance.layer_mean(l)
                ));
            }
        }
        Command::DiagnoseLandscape { ckpt, .. } => {
            let curves = pipeline::diagnose_landscape(&cfg, &load(ckpt)?, &data, out).map_err(runtime)?;
            log(&format!("{} directions written", curves.len()));
        }
        Command::SweepDpr { teacher, .. } => {
            let t = load(teacher)?;
            let r = pipeline::sweep_dpr(&cfg, &t, &data, out, &mut log).map_err(runtime)?;
            for e in &r.entries {
                log(&format!("student_dpr {}: val top-1 {:.4}", e.student_dpr, e.val_top1));
            }
            log(&format!("best student_dpr {}", r.best_rate()));
        }
        Command::GenData(_) => unreachable!(),
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut stderr = std::io::stderr().lock();
    match execute(&cli.command, &mut stderr) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message());
            f.code()
        }
    }
}
