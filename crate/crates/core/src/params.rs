use indexmap::IndexMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Ordered named-tensor store. Insertion order is the canonical order for
/// checkpoints, optimizer state and flattening.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: IndexMap<String, Tensor>,
}

/// Graph handles for every tensor of a [`Params`] store.
pub type ParamVars = IndexMap<String, Var>;

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidArgument("empty tensor name".into()));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count of tensors whose name satisfies `pred`.
    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`Params::flatten`] against this store's layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.numel() {
            return Err(shape_err(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = Params::new();
        let mut off = 0;
        for (name, t) in &self.tensors {
            let data = flat[off..off + t.len()].to_vec();
            off += t.len();
            out.tensors
                .insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    /// Places every tensor on `graph` as a leaf.
    pub fn load(&self, graph: &mut Graph, requires_grad: bool) -> ParamVars {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), graph.leaf(t.clone(), requires_grad)))
            .collect()
    }

    /// Views a flat vector node (laid out as [`Params::flatten`]) as one
    /// handle per tensor, so gradients can be checked in a single pass.
    pub fn split_flat(&self, graph: &mut Graph, flat: Var) -> Result<ParamVars> {
        if graph.value(flat).len() != self.numel() {
            return Err(shape_err("flat parameter vector has the wrong length"));
        }
        let mut out = ParamVars::new();
        let mut off = 0;
        for (name, t) in &self.tensors {
            let piece = graph.narrow(flat, 0, off, t.len())?;
            let piece = graph.reshape(piece, t.shape())?;
            off += t.len();
            out.insert(name.clone(), piece);
        }
        Ok(out)
    }

    /// Gradients for every tensor in `vars`, zero-filled where none flowed.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &Gradients) -> Result<Params> {
        let mut out = Params::new();
        for (name, t) in &self.tensors {
            let v = *vars
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let g = grads.get_or_zeros(v, t.len());
            out.tensors
                .insert(name.clone(), Tensor::new(t.shape().to_vec(), g)?);
        }
        Ok(out)
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.values_mut().for_each(Tensor::round_to_f32);
    }

    /// Same names in the same order with bit-identical contents.
    pub fn bit_eq(&self, other: &Params) -> bool {
        self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}
