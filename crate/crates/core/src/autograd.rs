//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward
//! value. [`Graph::backward`] walks the tape in reverse and returns a
//! [`Gradients`] table for every node that depends on a leaf created with
//! `requires_grad = true`. The op set is the one the encoder, the
//! distillation loss and the classifier loss need; it is not a general
//! tensor library.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, LnCache};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks a gathered position that receives zero instead of a source value.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    /// `y` repeated over the leading axes of `x`.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    /// `[.., K] x [K, N]`
    MatMul(Var, Var),
    /// `[G, M, K] x [G, K, N]`, or `[G, N, K]` transposed when the flag is set.
    BatchMatMul(Var, Var, bool),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        outer: usize,
        axis_in: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        cache: LnCache,
    },
    Softmax(Var),
    Gelu(Var),
    ScaleRows(Var, Vec<f64>),
    Gather(Var, Rc<[usize]>),
    PrependToken(Var, Var),
    MeanAxis {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        beta: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    SumSquares(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 || data.is_empty() {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let (run, run_stride) = (out_shape[rank - 1], strides[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..data.len() / run {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            out.extend((0..run).map(|j| data[base + j * run_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node; gradients flow to it only when `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Mul(a, b), ng))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (sx, sy) = (tx.shape(), ty.shape());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(shape_err(format!("broadcast {sy:?} onto {sx:?}")));
        }
        let n = ty.len();
        let data = if n == 0 {
            Vec::new()
        } else {
            tx.data()
                .chunks_exact(n)
                .flat_map(|c| c.iter().zip(ty.data()).map(|(a, b)| a + b))
                .collect()
        };
        let shape = sx.to_vec();
        let ng = self.needs(x) || self.needs(y);
        Ok(self.push(shape, data, Op::AddBroadcast(x, y), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(shape, data, Op::Scale(x, s), ng)
    }

    /// `a [.., K] · w [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.shape().len() != 2 || ta.shape().is_empty() || ta.last_dim() != tw.shape()[0] {
            return Err(shape_err(format!("matmul {:?} x {:?}", ta.shape(), tw.shape())));
        }
        let k = tw.shape()[0];
        let n = tw.shape()[1];
        let m = numel(&ta.shape()[..ta.shape().len() - 1]);
        let mut out = vec![0.0; m * n];
        ops::gemm(m, k, n, ta.data(), false, tw.data(), false, &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(w);
        Ok(self.push(shape, out, Op::MatMul(a, w), ng))
    }

    /// Affine map over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Batched matmul over a leading group axis.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("bmm {sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err(format!("bmm inner dims {sa:?} x {sb:?} (trans {trans_b})")));
        }
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            ops::gemm(
                m,
                k,
                n,
                &ta.data()[gi * m * k..(gi + 1) * m * k],
                false,
                &tb.data()[gi * k * n..(gi + 1) * k * n],
                trans_b,
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul(a, b, trans_b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.len() {
            return Err(shape_err(format!("reshape {:?} -> {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let ng = self.needs(x);
        Ok(self.push(shape, data, Op::Permute(x, perm.to_vec()), ng))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(format!("narrow axis {axis} [{start}, +{len}) of {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let axis_in = s[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_in * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(
            shape,
            data,
            Op::Narrow {
                x,
                outer,
                axis_in,
                inner,
                start,
                len,
            },
            ng,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if c == 0 {
            return Err(shape_err("layer_norm over an empty axis"));
        }
        let (g, b) = match affine {
            Some((g, b)) => {
                let (tg, tb) = (self.value(g), self.value(b));
                if tg.len() != c || tb.len() != c {
                    return Err(shape_err(format!(
                        "layer_norm affine {:?}/{:?} for channels {c}",
                        tg.shape(),
                        tb.shape()
                    )));
                }
                (Some(tg.data()), Some(tb.data()))
            }
            None => (None, None),
        };
        let (out, cache) = ops::layer_norm_fwd(t.data(), c, g, b, eps);
        let shape = t.shape().to_vec();
        let ng = self.needs(x) || affine.is_some_and(|(g, b)| self.needs(g) || self.needs(b));
        Ok(self.push(shape, out, Op::LayerNorm { x, affine, cache }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if n == 0 {
            return Err(shape_err("softmax over an empty axis"));
        }
        let out = ops::softmax_fwd(t.data(), n);
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::Softmax(x), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| ops::gelu_scalar(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(shape, data, Op::Gelu(x), ng)
    }

    /// Multiplies the `i`-th slice along the leading axis by `scales[i]`.
    pub fn scale_rows(&mut self, x: Var, scales: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let lead = t.shape().first().copied().unwrap_or(0);
        if scales.len() != lead {
            return Err(shape_err(format!("{} row scales for {:?}", scales.len(), t.shape())));
        }
        let inner = if lead == 0 { 0 } else { t.len() / lead };
        let mut data = t.data().to_vec();
        if inner > 0 {
            for (chunk, s) in data.chunks_exact_mut(inner).zip(&scales) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, data, Op::ScaleRows(x, scales), ng))
    }

    /// `out[i] = src[index[i]]`, or 0 where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if numel(shape) != index.len() {
            return Err(shape_err(format!("gather of {} indices into {shape:?}", index.len())));
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(0.0);
            } else if i < t.len() {
                data.push(t.data()[i]);
            } else {
                return Err(shape_err(format!("gather index {i} out of range {}", t.len())));
            }
        }
        let ng = self.needs(src);
        Ok(self.push(shape.to_vec(), data, Op::Gather(src, index), ng))
    }

    /// Prepends `token` (any shape with `D` elements) to every sequence in `x [B, N, D]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(token));
        let s = tx.shape();
        if s.len() != 3 || tt.len() != s[2] {
            return Err(shape_err(format!("prepend {:?} to {s:?}", tt.shape())));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            data.extend_from_slice(tt.data());
            data.extend_from_slice(&tx.data()[bi * n * d..(bi + 1) * n * d]);
        }
        let ng = self.needs(x) || self.needs(token);
        Ok(self.push(vec![b, n + 1, d], data, Op::PrependToken(x, token), ng))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err(format!("mean over axis {axis} of {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let n = s[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &t.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], src);
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = s.to_vec();
        shape.remove(axis);
        let ng = self.needs(x);
        Ok(self.push(
            shape,
            data,
            Op::MeanAxis {
                x,
                outer,
                axis: n,
                inner,
            },
            ng,
        ))
    }

    /// Mean elementwise smooth-ℓ1 between `pred` and a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, beta: f64) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(shape_err(format!(
                "smooth_l1 prediction {:?} vs target {:?}",
                tp.shape(),
                target.shape()
            )));
        }
        if tp.is_empty() {
            return Err(shape_err("smooth_l1 over an empty tensor"));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| ops::smooth_l1_scalar(p - t, beta))
            .sum();
        let value = total / tp.len() as f64;
        let ng = self.needs(pred);
        Ok(self.push(
            vec![],
            vec![value],
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                beta,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `logits [B, K]` against a label-smoothed
    /// target: `1 - eps + eps/K` on the label and `eps/K` elsewhere.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(format!("cross_entropy logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let probs = ops::softmax_fwd(t.data(), k);
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let lp = log_softmax_row(&t.data()[row * k..(row + 1) * k]);
            for (j, l) in lp.iter().enumerate() {
                total -= smoothed_target(j, label, k, smoothing) * l;
            }
        }
        let value = total / labels.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            vec![],
            vec![value],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
            ng,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|v| v * v).sum();
        let ng = self.needs(x);
        self.push(vec![], vec![v], Op::SumSquares(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let ng = self.needs(x);
        self.push(vec![], vec![v], Op::Sum(x), ng)
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(acc(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g = acc(grads, *a, dy.len());
                    for ((gi, d), bv) in g.iter_mut().zip(dy).zip(val(*b).data()) {
                        *gi += d * bv;
                    }
                }
                if self.needs(*b) {
                    let g = acc(grads, *b, dy.len());
                    for ((gi, d), av) in g.iter_mut().zip(dy).zip(val(*a).data()) {
                        *gi += d * av;
                    }
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.needs(*x) {
                    add_into(acc(grads, *x, dy.len()), dy);
                }
                if self.needs(*y) {
                    let n = val(*y).len();
                    if n > 0 {
                        let g = acc(grads, *y, n);
                        for chunk in dy.chunks_exact(n) {
                            add_into(g, chunk);
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    let g = acc(grads, *x, dy.len());
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d * s;
                    }
                }
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let k = tw.shape()[0];
                let n = tw.shape()[1];
                let m = numel(&ta.shape()[..ta.shape().len() - 1]);
                if self.needs(*a) {
                    let g = acc(grads, *a, ta.len());
                    // dA = dY · Wᵀ
                    ops::gemm(m, n, k, dy, false, tw.data(), true, g, true);
                }
                if self.needs(*w) {
                    let g = acc(grads, *w, tw.len());
                    // dW = Aᵀ · dY
                    ops::gemm(k, m, n, ta.data(), true, dy, false, g, true);
                }
            }
            Op::BatchMatMul(a, b, trans_b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = if *trans_b { tb.shape()[1] } else { tb.shape()[2] };
                if self.needs(*a) {
                    let ga = acc(grads, *a, ta.len());
                    for gi in 0..g {
                        let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                        let bg = &tb.data()[gi * k * n..(gi + 1) * k * n];
                        // dA = dY · Bᵀ, where B is [k,n] (or stored [n,k] when transposed)
                        ops::gemm(m, n, k, dyg, false, bg, !*trans_b, &mut ga[gi * m * k..(gi + 1) * m * k], true);
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, tb.len());
                    for gi in 0..g {
                        let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                        let ag = &ta.data()[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // B stored [n,k]: dB = dYᵀ · A
                            ops::gemm(n, m, k, dyg, true, ag, false, dst, true);
                        } else {
                            // dB = Aᵀ · dY
                            ops::gemm(k, m, n, ag, true, dyg, false, dst, true);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(acc(grads, *x, dy.len()), dy);
                }
            }
            Op::Permute(x, perm) => {
                if self.needs(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = permute_data(dy, node.value.shape(), &inv);
                    add_into(acc(grads, *x, dy.len()), &back);
                }
            }
            Op::Narrow {
                x,
                outer,
                axis_in,
                inner,
                start,
                len,
            } => {
                if self.needs(*x) {
                    let g = acc(grads, *x, outer * axis_in * inner);
                    for o in 0..*outer {
                        let base = o * axis_in * inner + start * inner;
                        let src = &dy[o * len * inner..(o + 1) * len * inner];
                        add_into(&mut g[base..base + len * inner], src);
                    }
                }
            }
            Op::LayerNorm { x, affine, cache } => {
                let c = node.value.last_dim();
                let gamma = affine.map(|(g, _)| val(g).data());
                let mut dgamma = affine.filter(|(g, _)| self.needs(*g)).map(|_| vec![0.0; c]);
                let mut dbeta = affine.filter(|(_, b)| self.needs(*b)).map(|_| vec![0.0; c]);
                let dx = ops::layer_norm_bwd(dy, c, cache, gamma, dgamma.as_deref_mut(), dbeta.as_deref_mut());
                if self.needs(*x) {
                    add_into(acc(grads, *x, dx.len()), &dx);
                }
                if let (Some((g, _)), Some(dg)) = (affine, dgamma) {
                    add_into(acc(grads, *g, c), &dg);
                }
                if let (Some((_, b)), Some(db)) = (affine, dbeta) {
                    add_into(acc(grads, *b, c), &db);
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let n = node.value.last_dim();
                    let dx = ops::softmax_bwd(node.value.data(), dy, n);
                    add_into(acc(grads, *x, dx.len()), &dx);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xs = val(*x).data();
                    let g = acc(grads, *x, dy.len());
                    for ((gi, d), &xv) in g.iter_mut().zip(dy).zip(xs) {
                        *gi += d * ops::gelu_grad_scalar(xv);
                    }
                }
            }
            Op::ScaleRows(x, scales) => {
                if self.needs(*x) && !scales.is_empty() {
                    let inner = dy.len() / scales.len();
                    let g = acc(grads, *x, dy.len());
                    if inner > 0 {
                        for ((gc, dc), s) in g.chunks_exact_mut(inner).zip(dy.chunks_exact(inner)).zip(scales) {
                            for (gi, d) in gc.iter_mut().zip(dc) {
                                *gi += d * s;
                            }
                        }
                    }
                }
            }
            Op::Gather(src, index) => {
                if self.needs(*src) {
                    let g = acc(grads, *src, val(*src).len());
                    for (&i, d) in index.iter().zip(dy) {
                        if i != GATHER_ZERO {
                            g[i] += d;
                        }
                    }
                }
            }
            Op::PrependToken(x, tok) => {
                let s = node.value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                if self.needs(*x) {
                    let g = acc(grads, *x, b * (t - 1) * d);
                    for bi in 0..b {
                        let src = &dy[(bi * t + 1) * d..(bi + 1) * t * d];
                        add_into(&mut g[bi * (t - 1) * d..(bi + 1) * (t - 1) * d], src);
                    }
                }
                if self.needs(*tok) {
                    let g = acc(grads, *tok, d);
                    for bi in 0..b {
                        add_into(g, &dy[bi * t * d..(bi * t + 1) * d]);
                    }
                }
            }
            Op::MeanAxis { x, outer, axis, inner } => {
                if self.needs(*x) {
                    let g = acc(grads, *x, outer * axis * inner);
                    let scale = 1.0 / *axis as f64;
                    for o in 0..*outer {
                        for a in 0..*axis {
                            let dst = &mut g[(o * axis + a) * inner..(o * axis + a + 1) * inner];
                            for (gi, d) in dst.iter_mut().zip(&dy[o * inner..(o + 1) * inner]) {
                                *gi += d * scale;
                            }
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                if self.needs(*pred) {
                    let p = val(*pred).data();
                    let scale = dy[0] / p.len() as f64;
                    let g = acc(grads, *pred, p.len());
                    for ((gi, pv), tv) in g.iter_mut().zip(p).zip(target) {
                        *gi += scale * ops::smooth_l1_grad_scalar(pv - tv, *beta);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
                probs,
            } => {
                if self.needs(*logits) {
                    let k = val(*logits).shape()[1];
                    let scale = dy[0] / labels.len() as f64;
                    let g = acc(grads, *logits, probs.len());
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let q = smoothed_target(j, label, k, *smoothing);
                            g[row * k + j] += scale * (probs[row * k + j] - q);
                        }
                    }
                }
            }
            Op::SumSquares(x) => {
                if self.needs(*x) {
                    let xs = val(*x).data();
                    let g = acc(grads, *x, xs.len());
                    for (gi, v) in g.iter_mut().zip(xs) {
                        *gi += 2.0 * v * dy[0];
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let g = acc(grads, *x, val(*x).len());
                    g.iter_mut().for_each(|gi| *gi += dy[0]);
                }
            }
        }
    }
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

pub(crate) fn smoothed_target(j: usize, label: usize, k: usize, eps: f64) -> f64 {
    let off = eps / k as f64;
    if j == label {
        1.0 - eps + off
    } else {
        off
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_backward_small() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true);
        let w = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap(), true);
        let y = g.matmul(a, w).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(gr.get(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [i,j,k] of x lands at [k,i,j]
        assert_eq!(g.value(p).data()[3 * 6 + 3 + 2], 12.0 + 2.0 * 4.0 + 3.0);
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(q).data(), g.value(x).data());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::from_vec(vec![3.0, 4.0]), true);
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(a).is_none());
        assert_eq!(gr.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.cross_entropy(l, &[2], 0.0).is_err());
    }
}
