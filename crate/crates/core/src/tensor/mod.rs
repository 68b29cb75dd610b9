//! Dense row-major tensors with a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every node that was created with
//! [`Graph::param`] (or depends on one).
//!
//! Shapes are explicit: the only broadcast is adding a bias vector along
//! the trailing dimension ([`Graph::add_bias`]).

mod graph;
pub mod kernels;
mod scalar;

pub use graph::{Graph, Var};
pub use scalar::Scalar;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss has no unmasked positions")]
    EmptyLoss,
    #[error("target id {id} out of range for {classes} classes")]
    TargetOutOfRange { id: usize, classes: usize },
    #[error("index {id} out of range for embedding table with {rows} rows")]
    IndexOutOfRange { id: usize, rows: usize },
    #[error("head dimension {0} must be even")]
    OddHeadDim(usize),
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor; panics otherwise.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}
