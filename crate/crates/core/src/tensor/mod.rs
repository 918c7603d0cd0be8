//! Dense row-major tensors with a reverse-mode autodiff tape.
//!
//! Values live in [`Tensor`]; learnable state lives in a [`ParamStore`].
//! A forward pass records operations on a [`Graph`] through [`Var`]
//! handles, and [`Graph::backward`] walks the record once in reverse.
//! Parameter buffers are shared with the graph by reference count, so
//! binding a parameter does not copy it.
//!
//! Shape mismatches in primitives are contract violations and panic with
//! the offending shapes.

mod checkpoint;
mod gradcheck;
mod graph;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{
    grad_check, grad_check_params, primitive_suite, GradCheckReport, Parameterized, SUITE_EPS,
    SUITE_TOL,
};
pub use graph::{Graph, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Contract(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; numel(shape)]))
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), Arc::new(vec![value]))
    }

    /// Uniform in `[low, high)`; a degenerate range fills with `low`.
    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Self {
        if low >= high {
            return Self::full(shape, T::lit(low));
        }
        let data = (0..numel(shape))
            .map(|_| T::lit(rng.random_range(low..high)))
            .collect();
        Self::from_parts(shape.to_vec(), Arc::new(data))
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel(shape))
            .map(|_| T::lit(dist.sample(rng)))
            .collect();
        Self::from_parts(shape.to_vec(), Arc::new(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Copy-on-write if a graph still holds this buffer.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(
            g.len(),
            self.data.len(),
            "gradient length for shape {:?}",
            self.shape
        );
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&x| U::lit(x.as_f64())).collect();
        Tensor::from_parts(self.shape.clone(), Arc::new(data))
            .with_requires_grad(self.requires_grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<T>)>) {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(&g);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Replace the value of a same-shaped parameter, e.g. from a checkpoint.
    pub fn assign(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape != value.shape {
            return Err(Error::Mismatch(format!(
                "parameter {} has shape {:?}, checkpoint has {:?}",
                self.names[id.0], slot.shape, value.shape
            )));
        }
        *slot = value.with_requires_grad(true);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn same_values(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape && a.data == b.data)
    }
}
