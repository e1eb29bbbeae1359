use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{EncoderConfig, PosMode};
use super::patch::patchify;
use super::rpb::{table_len, RelPosBias};
use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::{drop_path_scales, Mode, LN_EPS};
use crate::params::{ParamVars, Params};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Post-softmax attention of one image: `probs` is `[L, heads, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub probs: Tensor,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl AttentionRecord {
    pub fn layers(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Row-major `[T, T]` map of one layer and head.
    pub fn map(&self, layer: usize, head: usize) -> &[f64] {
        let t = self.tokens();
        let off = (layer * self.heads() + head) * t * t;
        &self.probs.data()[off..off + t * t]
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B, N_patch, dim]` after the final norm, raster order.
    pub patch_features: Tensor,
    /// `[B, dim]`
    pub cls_feature: Tensor,
    /// `[B, num_classes]` when the encoder has a classifier head.
    pub logits: Option<Tensor>,
    /// One record per image when capture was requested.
    pub attention: Option<Vec<AttentionRecord>>,
}

/// Graph handles produced by [`Encoder::forward_graph`].
pub struct GraphOutput {
    pub patch: Var,
    pub cls: Var,
    pub logits: Option<Var>,
    /// Per-layer `[B, heads, T, T]` softmax outputs when captured.
    pub attention: Option<Vec<Tensor>>,
    /// Per-layer `[B, heads, T, T]` pre-softmax logits when captured.
    pub attention_logits: Option<Vec<Tensor>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Drop-path rate used on every residual branch in train mode.
    pub drop_path_rate: f64,
    pub capture: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            drop_path_rate: 0.0,
            capture: false,
        }
    }

    pub fn train(drop_path_rate: f64) -> Self {
        Self {
            mode: Mode::Train,
            drop_path_rate,
            capture: false,
        }
    }

    pub fn capturing(mut self) -> Self {
        self.capture = true;
        self
    }
}

/// Small ViT-style encoder: patch embedding, CLS token, pre-norm
/// transformer blocks, final layer norm, optional linear head on CLS.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: Params,
    rpb: Option<RelPosBias>,
}

/// Canonical parameter layout for `cfg`, in checkpoint order.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let r = table_len(cfg.grid(), cfg.grid());
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".into(), vec![d]),
        ("cls_token".into(), vec![d]),
    ];
    match cfg.pos_mode {
        PosMode::Ape => out.push(("pos_embed".into(), vec![cfg.tokens(), d])),
        PosMode::SharedRpb => {
            out.push(("rel_pos.table".into(), vec![cfg.heads, r]));
            out.push(("rel_pos.cls".into(), vec![cfg.heads, 2]));
        }
        PosMode::Rpb => {}
    }
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        out.push((format!("{p}.norm1.weight"), vec![d]));
        out.push((format!("{p}.norm1.bias"), vec![d]));
        if cfg.pos_mode == PosMode::Rpb {
            out.push((format!("{p}.rel_pos.table"), vec![cfg.heads, r]));
            out.push((format!("{p}.rel_pos.cls"), vec![cfg.heads, 2]));
        }
        out.push((format!("{p}.attn.qkv.weight"), vec![d, 3 * d]));
        out.push((format!("{p}.attn.qkv.bias"), vec![3 * d]));
        out.push((format!("{p}.attn.proj.weight"), vec![d, d]));
        out.push((format!("{p}.attn.proj.bias"), vec![d]));
        out.push((format!("{p}.norm2.weight"), vec![d]));
        out.push((format!("{p}.norm2.bias"), vec![d]));
        out.push((format!("{p}.mlp.fc1.weight"), vec![d, hidden]));
        out.push((format!("{p}.mlp.fc1.bias"), vec![hidden]));
        out.push((format!("{p}.mlp.fc2.weight"), vec![hidden, d]));
        out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
    }
    out.push(("norm.weight".into(), vec![d]));
    out.push(("norm.bias".into(), vec![d]));
    if let Some(k) = cfg.num_classes {
        out.push(("head.weight".into(), vec![d, k]));
        out.push(("head.bias".into(), vec![k]));
    }
    out
}

fn is_rpb_table(name: &str) -> bool {
    name.ends_with("rel_pos.table")
}

/// Normal(0, std) truncated to two standard deviations.
pub(crate) fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..len)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let data = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
        vec![1.0; len]
    } else if name.ends_with(".bias") {
        vec![0.0; len]
    } else {
        trunc_normal(rng, len, INIT_STD)
    };
    let mut t = Tensor::new(shape.to_vec(), data)?;
    t.round_to_f32();
    Ok(t)
}

impl Encoder {
    /// Fresh weights drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        for (name, shape) in param_shapes(&cfg) {
            let t = init_tensor(&name, &shape, rng)?;
            params.insert(name, t)?;
        }
        Self::from_params(cfg, params)
    }

    /// Wraps existing weights, checking names and shapes against `cfg`.
    pub fn from_params(cfg: EncoderConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let expected = param_shapes(&cfg);
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(format!(
                    "`{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            let extra: Vec<&String> = params
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == *n))
                .collect();
            return Err(Error::InvalidArgument(format!(
                "unexpected tensors for this config: {extra:?}"
            )));
        }
        let rpb = cfg.pos_mode.uses_rpb().then(|| {
            RelPosBias::new(cfg.grid(), cfg.grid(), cfg.heads, cfg.pos_mode == PosMode::SharedRpb)
        });
        Ok(Self { cfg, params, rpb })
    }

    /// Replaces the classifier head with a freshly initialized one of width
    /// `k` (or removes it when `None`).
    pub fn reset_head<R: Rng + ?Sized>(&mut self, k: Option<usize>, rng: &mut R) -> Result<()> {
        self.params.remove("head.weight");
        self.params.remove("head.bias");
        self.cfg.num_classes = k;
        self.cfg.validate()?;
        if let Some(k) = k {
            let w = init_tensor("head.weight", &[self.cfg.dim, k], rng)?;
            self.params.insert("head.weight", w)?;
            self.params.insert("head.bias", Tensor::zeros(&[k]))?;
        }
        Ok(())
    }

    /// Scalar count of the relative position bias tables.
    pub fn rpb_param_count(&self) -> usize {
        self.params.numel_where(is_rpb_table)
    }

    pub fn rel_pos_bias(&self) -> Option<&RelPosBias> {
        self.rpb.as_ref()
    }

    /// `[heads, T, T]` logit bias of one layer, or `None` under APE.
    pub fn layer_bias(&self, layer: usize) -> Result<Option<Tensor>> {
        let Some(rpb) = &self.rpb else { return Ok(None) };
        let mut g = Graph::new();
        let vars = self.params.load(&mut g, false);
        let v = self.bias_var(&mut g, &vars, rpb, layer)?;
        Ok(Some(g.value(v).clone()))
    }

    fn bias_var(&self, g: &mut Graph, vars: &ParamVars, rpb: &RelPosBias, layer: usize) -> Result<Var> {
        let prefix = if rpb.shared {
            "rel_pos".to_string()
        } else {
            format!("blocks.{layer}.rel_pos")
        };
        let table = vars[&format!("{prefix}.table")];
        let cls = vars[&format!("{prefix}.cls")];
        let t = rpb.tokens();
        let shape = [rpb.heads, t, t];
        let a = g.gather(table, rpb.table_gather.clone(), &shape)?;
        let b = g.gather(cls, rpb.cls_gather.clone(), &shape)?;
        g.add(a, b)
    }

    /// Records the forward pass of `images [B, C, S, S]` on `g` using the
    /// parameter handles in `vars` (from `self.params.load`).
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        images: &Tensor,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<GraphOutput> {
        let cfg = &self.cfg;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(shape_err(format!(
                "images {s:?} do not match [B, {}, {}, {}]",
                cfg.in_channels, cfg.image_size, cfg.image_size
            )));
        }
        let b = s[0];
        let (t, d, heads, hd) = (cfg.tokens(), cfg.dim, cfg.heads, cfg.head_dim());
        let p = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::MissingTensor(name.to_string()))
        };

        let patches = g.constant(patchify(images, cfg.patch_size)?);
        let emb = g.linear(patches, p("patch_embed.weight")?, Some(p("patch_embed.bias")?))?;
        let mut x = g.prepend_token(emb, p("cls_token")?)?;
        if cfg.pos_mode == PosMode::Ape {
            x = g.add_broadcast(x, p("pos_embed")?)?;
        }

        let shared_bias = match &self.rpb {
            Some(rpb) if rpb.shared => Some(self.bias_var(g, vars, rpb, 0)?),
            _ => None,
        };
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn_probs = opts.capture.then(Vec::new);
        let mut attn_logits = opts.capture.then(Vec::new);

        for layer in 0..cfg.depth {
            let pre = format!("blocks.{layer}");
            let w = |suffix: &str| p(&format!("{pre}.{suffix}"));

            let h = g.layer_norm(x, Some((w("norm1.weight")?, w("norm1.bias")?)), LN_EPS)?;
            let qkv = g.linear(h, w("attn.qkv.weight")?, Some(w("attn.qkv.bias")?))?;
            let qkv = g.reshape(qkv, &[b, t, 3, heads, hd])?;
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
            let qkv = g.reshape(qkv, &[3, b * heads, t, hd])?;
            let mut qkv_parts = [qkv; 3];
            for (i, part) in qkv_parts.iter_mut().enumerate() {
                let n = g.narrow(qkv, 0, i, 1)?;
                *part = g.reshape(n, &[b * heads, t, hd])?;
            }
            let [q, k, v] = qkv_parts;

            let scores = g.bmm(q, k, true)?;
            let mut scores = g.scale(scores, scale);
            let bias = match &self.rpb {
                Some(_) if shared_bias.is_some() => shared_bias,
                Some(rpb) => Some(self.bias_var(g, vars, rpb, layer)?),
                None => None,
            };
            if let Some(bias) = bias {
                let s4 = g.reshape(scores, &[b, heads, t, t])?;
                let s4 = g.add_broadcast(s4, bias)?;
                scores = g.reshape(s4, &[b * heads, t, t])?;
            }
            let probs = g.softmax(scores)?;
            if let (Some(ap), Some(al)) = (attn_probs.as_mut(), attn_logits.as_mut()) {
                ap.push(g.value(probs).clone().reshape(&[b, heads, t, t])?);
                al.push(g.value(scores).clone().reshape(&[b, heads, t, t])?);
            }
            let ctx = g.bmm(probs, v, false)?;
            let ctx = g.reshape(ctx, &[b, heads, t, hd])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b, t, d])?;
            let out = g.linear(ctx, w("attn.proj.weight")?, Some(w("attn.proj.bias")?))?;
            let out = self.drop_path(g, out, b, opts, rng)?;
            x = g.add(x, out)?;

            let h = g.layer_norm(x, Some((w("norm2.weight")?, w("norm2.bias")?)), LN_EPS)?;
            let h = g.linear(h, w("mlp.fc1.weight")?, Some(w("mlp.fc1.bias")?))?;
            let h = g.gelu(h);
            let h = g.linear(h, w("mlp.fc2.weight")?, Some(w("mlp.fc2.bias")?))?;
            let h = self.drop_path(g, h, b, opts, rng)?;
            x = g.add(x, h)?;
        }

        let x = g.layer_norm(x, Some((p("norm.weight")?, p("norm.bias")?)), LN_EPS)?;
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, d])?;
        let patch = g.narrow(x, 1, 1, t - 1)?;
        let logits = match cfg.num_classes {
            Some(_) => Some(g.linear(cls, p("head.weight")?, Some(p("head.bias")?))?),
            None => None,
        };
        Ok(GraphOutput {
            patch,
            cls,
            logits,
            attention: attn_probs,
            attention_logits: attn_logits,
        })
    }

    fn drop_path<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        batch: usize,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let scales = drop_path_scales(batch, opts.drop_path_rate, opts.mode, rng)?;
        if scales.iter().all(|&s| s == 1.0) {
            return Ok(x);
        }
        g.scale_rows(x, scales)
    }

    /// Gradient-free forward pass.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        images: &Tensor,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let vars = self.params.load(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, images, opts, rng)?;
        let attention = match out.attention {
            Some(layers) => Some(self.records_from_layers(&layers)?),
            None => None,
        };
        Ok(EncoderOutput {
            patch_features: g.value(out.patch).clone(),
            cls_feature: g.value(out.cls).clone(),
            logits: out.logits.map(|v| g.value(v).clone()),
            attention,
        })
    }

    /// Splits per-layer `[B, heads, T, T]` captures into per-image records.
    pub fn records_from_layers(&self, layers: &[Tensor]) -> Result<Vec<AttentionRecord>> {
        let Some(first) = layers.first() else {
            return Ok(Vec::new());
        };
        let b = first.shape()[0];
        let per = first.len() / b.max(1);
        (0..b)
            .map(|bi| {
                let mut data = Vec::with_capacity(per * layers.len());
                for l in layers {
                    data.extend_from_slice(&l.data()[bi * per..(bi + 1) * per]);
                }
                let mut shape = vec![layers.len()];
                shape.extend_from_slice(&first.shape()[1..]);
                Ok(AttentionRecord {
                    probs: Tensor::new(shape, data)?,
                    grid: (self.cfg.grid(), self.cfg.grid()),
                    patch_size: self.cfg.patch_size,
                })
            })
            .collect()
    }
}

/// Patch embedding alone: `[B, C, S, S] -> [B, N_patch, dim]`.
pub fn patch_embed(images: &Tensor, cfg: &EncoderConfig, params: &Params) -> Result<Tensor> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(shape_err(format!("images {s:?} do not match the encoder config")));
    }
    let mut g = Graph::new();
    let x = g.constant(patchify(images, cfg.patch_size)?);
    let w = g.constant(params.get("patch_embed.weight")?.clone());
    let bias = g.constant(params.get("patch_embed.bias")?.clone());
    let y = g.linear(x, w, Some(bias))?;
    Ok(g.value(y).clone())
}
