//! Run configuration: an INI file with sections `[model]`, `[distill]`,
//! `[finetune]`, `[data]` and `[diagnostics]`. Every key has a default;
//! unknown sections or keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use serde::Serialize;

use super::data::{ShapeKind, ToySpec};
use crate::augment::AugmentConfig;
use crate::distill::{DistillConfig, TargetKind, TeacherNorm};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, ProbeConfig};
use crate::model::{EncoderConfig, PosMode};
use crate::optim::AdamWHyper;

/// Textual form of a config value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.trim().parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

macro_rules! named_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s.trim()).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.as_str().to_string()
            }
        }
    )*};
}

named_value!(PosMode, TargetKind, TeacherNorm);

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<ShapeKind> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.parse::<ShapeKind>().map_err(|e| e.to_string()))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! section {
    ($name:ident, $title:literal, { $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq, Serialize)]
        pub struct $name {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $name {
            pub const SECTION: &'static str = $title;
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).map_err(|e| {
                            Error::Config(format!("{}.{} = `{}`: {}", $title, key, value, e))
                        })?;
                        Ok(())
                    } )*
                    _ => Err(Error::UnknownKey(format!("{}.{}", $title, key))),
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.render()) ),*]
            }
        }
    };
}

section!(ModelSection, "model", {
    image_size: usize = 16,
    patch_size: usize = 4,
    in_channels: usize = 3,
    depth: usize = 4,
    dim: usize = 64,
    heads: usize = 4,
    mlp_ratio: usize = 4,
    /// Student position encoding.
    pos_mode: PosMode = PosMode::SharedRpb,
    /// Position encoding of the supervised desk-scale teacher.
    teacher_pos_mode: PosMode = PosMode::Ape,
    teacher_epochs: usize = 40,
    teacher_peak_lr: f64 = 1e-3,
    teacher_min_lr: f64 = 1e-5,
    teacher_warmup_epochs: usize = 5,
    teacher_drop_path: f64 = 0.1,
    seed: u64 = 0,
});

section!(DistillSection, "distill", {
    beta: f64 = 2.0,
    target: TargetKind = TargetKind::FullMap,
    teacher_norm: TeacherNorm = TeacherNorm::Whiten,
    student_dpr: f64 = 0.1,
    teacher_dpr: f64 = 0.0,
    epochs: usize = 100,
    batch_size: usize = 64,
    peak_lr: f64 = 1.2e-3,
    min_lr: f64 = 2e-5,
    warmup_epochs: usize = 10,
    weight_decay: f64 = 0.05,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    clip: f64 = 3.0,
    augment: bool = true,
    crop_scale_min: f64 = 0.08,
    crop_scale_max: f64 = 1.0,
    /// Student drop-path rates tried by `sweep-dpr`.
    sweep_rates: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4],
    seed: u64 = 0,
});

section!(FinetuneSection, "finetune", {
    epochs: usize = 100,
    batch_size: usize = 64,
    peak_lr: f64 = 5e-3,
    min_lr: f64 = 2e-6,
    warmup_epochs: usize = 20,
    weight_decay: f64 = 0.05,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    layer_decay: f64 = 0.65,
    drop_path_rate: f64 = 0.3,
    label_smoothing: f64 = 0.1,
    clip: f64 = 5.0,
    augment: bool = true,
    crop_padding: usize = 2,
    probe_epochs: usize = 90,
    probe_batch_size: usize = 64,
    probe_peak_lr: f64 = 1e-2,
    probe_weight_decay: f64 = 0.0,
    seed: u64 = 0,
});

section!(DataSection, "data", {
    classes: Vec<ShapeKind> = ShapeKind::ALL.to_vec(),
    image_size: usize = 16,
    channels: usize = 3,
    train_per_class: usize = 256,
    val_per_class: usize = 64,
    position_jitter: f64 = 0.15,
    scale_min: f64 = 0.22,
    scale_max: f64 = 0.4,
    rotate: bool = false,
    noise: f64 = 0.05,
    seed: u64 = 0,
});

section!(DiagnosticsSection, "diagnostics", {
    directions: usize = 5,
    alpha_min: f64 = -1.0,
    alpha_max: f64 = 1.0,
    alpha_steps: usize = 21,
    /// Report attention distances in pixels instead of patches.
    pixel_units: bool = false,
    /// Validation images whose attention is analysed (0 = all).
    attention_images: usize = 0,
    /// Chebyshev radius of the diagonal band.
    diagonal_band: usize = 1,
    seed: u64 = 0,
});

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub distill: DistillSection,
    pub finetune: FinetuneSection,
    pub data: DataSection,
    pub diagnostics: DiagnosticsSection,
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                match section {
                    Some(s) => cfg.set(s, key, value)?,
                    None => return Err(Error::UnknownKey(key.to_string())),
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ini_str(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match section.trim() {
            "model" => self.model.set(key.trim(), value),
            "distill" => self.distill.set(key.trim(), value),
            "finetune" => self.finetune.set(key.trim(), value),
            "data" => self.data.set(key.trim(), value),
            "diagnostics" => self.diagnostics.set(key.trim(), value),
            other => Err(Error::UnknownKey(format!("{other}.{}", key.trim()))),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not section.key=value")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| Error::UnknownKey(path.trim().to_string()))?;
        self.set(section, key, value)
    }

    /// Every key with its current value, as INI text.
    pub fn to_ini_string(&self) -> String {
        let sections = [
            (ModelSection::SECTION, self.model.entries()),
            (DistillSection::SECTION, self.distill.entries()),
            (FinetuneSection::SECTION, self.finetune.entries()),
            (DataSection::SECTION, self.data.entries()),
            (DiagnosticsSection::SECTION, self.diagnostics.entries()),
        ];
        let mut out = String::new();
        for (i, (name, entries)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Student architecture.
    pub fn encoder(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            image_size: m.image_size,
            patch_size: m.patch_size,
            in_channels: m.in_channels,
            depth: m.depth,
            dim: m.dim,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            pos_mode: m.pos_mode,
            drop_path_rate: 0.0,
            num_classes: None,
        }
    }

    /// Teacher architecture: the student's with the teacher position mode
    /// and a classifier over the data classes.
    pub fn teacher_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            pos_mode: self.model.teacher_pos_mode,
            num_classes: Some(self.data.classes.len()),
            ..self.encoder()
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            beta: d.beta,
            target: d.target,
            teacher_norm: d.teacher_norm,
            student_dpr: d.student_dpr,
            teacher_dpr: d.teacher_dpr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            optimizer: AdamWHyper {
                lr: d.peak_lr,
                beta1: d.adam_beta1,
                beta2: d.adam_beta2,
                eps: d.adam_eps,
                weight_decay: d.weight_decay,
            },
            min_lr: d.min_lr,
            warmup_epochs: d.warmup_epochs,
            clip: d.clip,
            seed: d.seed,
            augment: AugmentConfig {
                enabled: d.augment,
                scale_min: d.crop_scale_min,
                scale_max: d.crop_scale_max,
                ..AugmentConfig::default()
            },
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            optimizer: AdamWHyper {
                lr: f.peak_lr,
                beta1: f.adam_beta1,
                beta2: f.adam_beta2,
                eps: f.adam_eps,
                weight_decay: f.weight_decay,
            },
            min_lr: f.min_lr,
            warmup_epochs: f.warmup_epochs,
            layer_decay: f.layer_decay,
            drop_path_rate: f.drop_path_rate,
            label_smoothing: f.label_smoothing,
            clip: f.clip,
            augment: f.augment,
            crop_padding: f.crop_padding,
            seed: f.seed,
        }
    }

    /// Supervised teacher training: fine-tuning settings without layer
    /// decay, with the `teacher_*` schedule.
    pub fn teacher_config(&self) -> FinetuneConfig {
        let m = &self.model;
        FinetuneConfig {
            epochs: m.teacher_epochs,
            optimizer: AdamWHyper {
                lr: m.teacher_peak_lr,
                ..self.finetune_config().optimizer
            },
            min_lr: m.teacher_min_lr,
            warmup_epochs: m.teacher_warmup_epochs,
            layer_decay: 1.0,
            drop_path_rate: m.teacher_drop_path,
            seed: m.seed,
            ..self.finetune_config()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let f = &self.finetune;
        ProbeConfig {
            epochs: f.probe_epochs,
            batch_size: f.probe_batch_size,
            optimizer: AdamWHyper {
                lr: f.probe_peak_lr,
                weight_decay: f.probe_weight_decay,
                ..self.finetune_config().optimizer
            },
            seed: f.seed,
            ..ProbeConfig::default()
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        let d = &self.data;
        ToySpec {
            kinds: d.classes.clone(),
            image_size: d.image_size,
            channels: d.channels,
            train_per_class: d.train_per_class,
            val_per_class: d.val_per_class,
            position_jitter: d.position_jitter,
            scale_min: d.scale_min,
            scale_max: d.scale_max,
            rotate: d.rotate,
            noise: d.noise,
            seed: d.seed,
        }
    }

    /// Evenly spaced perturbation magnitudes for the loss landscape.
    pub fn alphas(&self) -> Vec<f64> {
        let d = &self.diagnostics;
        match d.alpha_steps {
            0 => Vec::new(),
            1 => vec![d.alpha_min],
            n => (0..n)
                .map(|i| d.alpha_min + (d.alpha_max - d.alpha_min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    /// Sets every stage seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.distill.seed = seed;
        self.finetune.seed = seed;
        self.diagnostics.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.distill.peak_lr, 1.2e-3);
        assert_eq!(c.distill.min_lr, 2e-5);
        assert_eq!(c.distill.warmup_epochs, 10);
        assert_eq!(c.distill.weight_decay, 0.05);
        assert_eq!(c.distill.clip, 3.0);
        assert_eq!(c.distill.beta, 2.0);
        assert_eq!((c.distill.adam_beta1, c.distill.adam_beta2, c.distill.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!(c.finetune.clip, 5.0);
        assert_eq!(c.finetune.label_smoothing, 0.1);
        assert_eq!(c.finetune.min_lr, 2e-6);
        assert_eq!(c.finetune.peak_lr, 5e-3);
        assert_eq!(c.finetune.layer_decay, 0.65);
        assert_eq!(c.finetune.warmup_epochs, 20);
        assert_eq!(c.diagnostics.directions, 5);
        assert_eq!(c.alphas().len(), 21);
        assert_eq!(c.alphas()[10], 0.0);
    }

    #[test]
    fn ini_round_trip() {
        let mut c = RunConfig::default();
        c.set("distill", "target", "gap").unwrap();
        c.set("data", "classes", "disk,cross").unwrap();
        c.set("distill", "sweep_rates", "0.1, 0.3").unwrap();
        let back = RunConfig::from_ini_str(&c.to_ini_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_ini_str("[distill]\nbetta = 2\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "distill.betta"), "{err}");
        let err = RunConfig::default().apply_override("train.lr=1").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "train.lr"));
        assert!(RunConfig::from_ini_str("loose = 1\n").is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_override("model.pos_mode=spiral"), Err(Error::Config(_))));
        c.apply_override("model.pos_mode=rpb").unwrap();
        assert_eq!(c.model.pos_mode, PosMode::Rpb);
    }

    #[test]
    fn derived_configs_validate() {
        let c = RunConfig::default();
        c.encoder().validate().unwrap();
        c.teacher_encoder().validate().unwrap();
        c.distill_config().validate().unwrap();
        c.finetune_config().validate().unwrap();
        c.teacher_config().validate().unwrap();
        c.toy_spec().validate().unwrap();
    }
}
