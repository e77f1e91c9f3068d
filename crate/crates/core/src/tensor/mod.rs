//! Dense f32 tensors, named parameter groups and the reverse-mode tape.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{ensure, PclError, Result};
use crate::rng::Rng;

pub use graph::{Graph, Var};
pub use optim::{AdamConfig, AdamState};

/// Gradients keyed by parameter name, as produced by [`Graph::backward`].
pub type GradientMap = BTreeMap<String, Vec<f32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        ensure!(shape.iter().all(|&d| d > 0), Dimension, "shape {shape:?} has a zero dimension");
        let numel: usize = shape.iter().product();
        ensure!(numel == data.len(), Dimension, "shape {shape:?} needs {numel} values, got {}", data.len());
        ensure!(data.iter().all(|x| x.is_finite()), Contract, "tensor data must be finite");
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(x: f32) -> Self {
        Tensor { shape: vec![], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Rows drawn i.i.d. from N(0, std^2).
    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: rng.normal_vec(numel, std), requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        ensure!(!rows.is_empty(), Dimension, "no rows");
        let cols = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == cols), Dimension, "ragged rows");
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count for a matrix; 1 for vectors and scalars.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f32>> {
        self.grad.as_mut()
    }

    /// Marks the tensor trainable (allocating a zero gradient) or not.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![0.0; self.data.len()]);
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Little-endian byte image of the values, for bit-exact comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors with a per-name freeze flag.
///
/// Frozen entries never receive gradient and are skipped by the optimizer, so
/// their bytes are stable across any amount of training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterGroup {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParameterGroup {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.frozen.remove(&name);
        self.params.insert(name, tensor.with_grad());
    }

    /// Inserts a tensor as-is, keeping its `requires_grad` flag.
    pub fn insert_raw(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| PclError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze(&mut self, name: &str) {
        if let Some(t) = self.params.get_mut(name) {
            t.set_requires_grad(false);
            self.frozen.insert(name.to_string());
        }
    }

    pub fn freeze_all(&mut self) {
        let names: Vec<String> = self.params.keys().cloned().collect();
        for n in names {
            self.freeze(&n);
        }
    }

    pub fn unfreeze(&mut self, name: &str) {
        if let Some(t) = self.params.get_mut(name) {
            self.frozen.remove(name);
            t.set_requires_grad(true);
        }
    }

    /// Adds matching entries of `grads` into the gradient buffers of
    /// trainable parameters. Entries for frozen or unknown names are ignored.
    pub fn accumulate(&mut self, grads: &GradientMap) {
        for (name, g) in grads {
            if self.frozen.contains(name) {
                continue;
            }
            if let Some(buf) = self.params.get_mut(name).and_then(Tensor::grad_mut) {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub(crate) fn trainable_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        let frozen = &self.frozen;
        self.params.iter_mut().filter(move |(n, _)| !frozen.contains(*n))
    }

    /// Merges `other` in, keeping each entry's freeze state.
    pub fn extend(&mut self, other: ParameterGroup) {
        for (name, t) in other.params {
            if other.frozen.contains(&name) {
                self.frozen.insert(name.clone());
            }
            self.params.insert(name, t);
        }
    }

    pub fn bit_eq(&self, other: &ParameterGroup) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(PclError::Dimension(_))));
        assert!(matches!(Tensor::new(vec![0], vec![]), Err(PclError::Dimension(_))));
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn grad_present_iff_requires_grad() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 4);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn frozen_params_ignore_gradients() {
        let mut g = ParameterGroup::new();
        g.insert("a", Tensor::zeros(&[2]));
        g.insert("b", Tensor::zeros(&[2]));
        g.freeze("b");
        let mut grads = GradientMap::new();
        grads.insert("a".into(), vec![1.0, 2.0]);
        grads.insert("b".into(), vec![1.0, 2.0]);
        g.accumulate(&grads);
        assert_eq!(g.get("a").unwrap().grad().unwrap(), &[1.0, 2.0]);
        assert!(g.get("b").unwrap().grad().is_none());
    }
}
