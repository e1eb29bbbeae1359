//! Procedural toy shapes dataset and its on-disk form.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{invalid, shape_err, Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Cross,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Cross, ShapeKind::Triangle];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Cross => "cross",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the point `(x, y)`, relative to the shape centre and already
    /// rotated into the shape frame, lies inside a shape of radius `r`.
    fn contains(self, x: f64, y: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => x * x + y * y <= r * r,
            ShapeKind::Square => x.abs().max(y.abs()) <= 0.8 * r,
            ShapeKind::Cross => {
                let arm = r / 3.5;
                (x.abs() <= arm && y.abs() <= r) || (y.abs() <= arm && x.abs() <= r)
            }
            ShapeKind::Triangle => [-PI / 2.0, PI / 6.0, 5.0 * PI / 6.0]
                .iter()
                .all(|a| x * a.cos() + y * a.sin() <= r / 2.0),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| invalid(format!("unknown shape `{s}`")))
    }
}

/// Parameters of the synthetic classification set. Class `i` is
/// `kinds[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub kinds: Vec<ShapeKind>,
    pub image_size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Centre offset as a fraction of the image side.
    pub position_jitter: f64,
    /// Shape radius range as a fraction of the image side.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Random in-plane rotation of the non-disk shapes.
    pub rotate: bool,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            kinds: ShapeKind::ALL.to_vec(),
            image_size: 16,
            channels: 3,
            train_per_class: 256,
            val_per_class: 64,
            position_jitter: 0.15,
            scale_min: 0.22,
            scale_max: 0.4,
            rotate: false,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.len() < 2 {
            return Err(invalid("toy dataset needs at least two classes"));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(invalid("toy images need a positive size and channel count"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(invalid("toy scale range must satisfy 0 < min <= max"));
        }
        if self.position_jitter < 0.0 || self.noise < 0.0 {
            return Err(invalid("toy jitter and noise must be nonnegative"));
        }
        Ok(())
    }
}

/// Labeled images `[N, C, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(shape_err(format!(
                "images {s:?} do not match {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, S, S]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_first(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    pub fn to_params(&self) -> Result<Params> {
        let mut p = Params::new();
        p.insert("images", self.images.clone())?;
        let labels = self.labels.iter().map(|&l| l as f64).collect();
        p.insert("labels", Tensor::new(vec![self.len()], labels)?)?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = serde_json::json!({ "classes": self.classes });
        save_checkpoint(path, &self.to_params()?, &cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let classes = ck
            .config
            .get("classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptManifest("dataset has no class count".into()))?;
        let labels = ck
            .tensors
            .get("labels")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        Self::new(ck.tensors.get("images")?.clone(), labels, classes as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    pub train: Dataset,
    pub val: Dataset,
}

impl ToyData {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.train.save(dir.as_ref().join("train.fdt"))?;
        self.val.save(dir.as_ref().join("val.fdt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            train: Dataset::load(dir.as_ref().join("train.fdt"))?,
            val: Dataset::load(dir.as_ref().join("val.fdt"))?,
        })
    }
}

fn render<R: Rng + ?Sized>(spec: &ToySpec, kind: ShapeKind, rng: &mut R, out: &mut Vec<f64>) {
    let s = spec.image_size as f64;
    let cx = s / 2.0 + rng.random_range(-1.0..=1.0) * spec.position_jitter * s;
    let cy = s / 2.0 + rng.random_range(-1.0..=1.0) * spec.position_jitter * s;
    let r = rng.random_range(spec.scale_min..=spec.scale_max) * s;
    let theta = if spec.rotate { rng.random_range(0.0..2.0 * PI) } else { 0.0 };
    let (sin, cos) = theta.sin_cos();
    let fg: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.55..1.0)).collect();
    let bg: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.0..0.35)).collect();

    let n = spec.image_size;
    let mut coverage = vec![0.0; n * n];
    let step = 1.0 / SUPERSAMPLE as f64;
    for (i, cov) in coverage.iter_mut().enumerate() {
        let (py, px) = ((i / n) as f64, (i % n) as f64);
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let u = px + (sx as f64 + 0.5) * step - cx;
                let v = py + (sy as f64 + 0.5) * step - cy;
                let (x, y) = (cos * u + sin * v, -sin * u + cos * v);
                hits += kind.contains(x, y, r) as usize;
            }
        }
        *cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    }
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    for c in 0..spec.channels {
        for &cov in &coverage {
            let mut v = bg[c] + cov * (fg[c] - bg[c]);
            if spec.noise > 0.0 {
                v += noise.sample(rng);
            }
            out.push(v as f32 as f64);
        }
    }
}

fn split(spec: &ToySpec, per_class: usize, stream: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let k = spec.kinds.len();
    let n = per_class * k;
    let s = spec.image_size;
    let mut data = Vec::with_capacity(n * spec.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        render(spec, spec.kinds[label], &mut rng, &mut data);
        labels.push(label);
    }
    let images = Tensor::new(vec![n, spec.channels, s, s], data)?;
    Dataset::new(images, labels, k)
}

/// Renders the train and validation splits. Labels cycle through the
/// classes, so every class gets exactly the requested count.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<ToyData> {
    spec.validate()?;
    Ok(ToyData {
        train: split(spec, spec.train_per_class, 0)?,
        val: split(spec, spec.val_per_class, 1)?,
    })
}
