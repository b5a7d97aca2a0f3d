//! Minimal reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]; learned weights live in a [`ParamSet`] that a
//! [`Graph`] borrows for the duration of one forward/backward pass. The graph is
//! rebuilt for every example (define-by-run), so sequence lengths are free to
//! vary between calls.
//!
//! Everything is generic over [`Real`] so that training can run in `f32` while
//! the finite-difference checks re-run the identical graph in `f64`.

mod adam;
mod gradcheck;
mod graph;
mod kernels;

use std::collections::HashMap;
use std::fmt::{Debug, Display};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use kernels::log_softmax;

/// Floating point element type accepted by the engine.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts a literal, rounding to the nearest representable value.
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("non-finite loss while probing parameter `{name}` entry {index}")]
    NonFiniteProbe { name: String, index: usize },
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// A `[1, n]` row.
    pub fn row(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn gaussian<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                T::lit(e * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Shape viewed as a matrix. Rank 0 and 1 tensors are treated as a single row.
    pub(crate) fn matrix_dims(&self) -> Result<[usize; 2], TensorError> {
        match self.shape.as_slice() {
            [] => Ok([1, 1]),
            [n] => Ok([1, *n]),
            [r, c] => Ok([*r, *c]),
            _ => Err(TensorError::contract(
                "tensor",
                format!("rank {} tensors are not supported by graph ops", self.shape.len()),
            )),
        }
    }
}

/// Handle to a named parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable tensors.
///
/// Insertion order is the serialization order, so two sets built by the same
/// code are layout-identical.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under `name`. Panics on a duplicate name, which is a
    /// model-construction bug rather than a runtime condition.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor's values with those of `other`, which must have the
    /// same names and shapes in the same order.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<(), TensorError> {
        if self.names != other.names {
            return Err(TensorError::contract(
                "copy_from",
                "parameter names differ between sets",
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape != src.shape {
                return Err(TensorError::Shape {
                    op: "copy_from",
                    left: dst.shape.clone(),
                    right: src.shape.clone(),
                });
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_wrong_length() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn cast_roundtrip_preserves_f32_values() {
        let t = Tensor::<f32>::row(vec![0.1, -2.5, 3.25]);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn param_names_are_unique() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::zeros(vec![1, 1]));
        ps.insert("w", Tensor::zeros(vec![1, 1]));
    }
}
