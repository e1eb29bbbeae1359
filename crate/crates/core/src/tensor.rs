//! Dense row-major tensors.
//!
//! Values are held as `f64` so gradient checks run in double precision.
//! Training rounds parameters to the nearest `f32` after every update
//! (see [`Tensor::round_to_f32`]), which makes 32-bit checkpoints lossless.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Copy of the `index`-th slice along the leading axis.
    pub fn index_first(&self, index: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| shape_err("cannot index a scalar"))?;
        if index >= lead {
            return Err(shape_err(format!("index {index} out of range for {lead}")));
        }
        let inner = self.data.len() / lead;
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Gathers slices along the leading axis.
    pub fn select_first(&self, indices: &[usize]) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| shape_err("cannot index a scalar"))?;
        let inner = if lead == 0 { 0 } else { self.data.len() / lead };
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= lead {
                return Err(shape_err(format!("index {i} out of range for {lead}")));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err(format!(
                    "stack of {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every element to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Bitwise equality of shape and data (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_ok());
    }

    #[test]
    fn grad_shape_must_match() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn select_and_stack() {
        let t = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s = t.select_first(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
        let st = Tensor::stack(&[t.index_first(1).unwrap(), t.index_first(2).unwrap()]).unwrap();
        assert_eq!(st.shape(), &[2, 2]);
        assert_eq!(st.data(), &[2., 3., 4., 5.]);
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let mut t = Tensor::from_vec(vec![0.1, 1.0 / 3.0, -2.5e-7]);
        t.round_to_f32();
        let once = t.clone();
        t.round_to_f32();
        assert!(t.bit_eq(&once));
    }
}
