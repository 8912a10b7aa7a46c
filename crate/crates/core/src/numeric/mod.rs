//! Dense tensors with a reverse-mode tape, and a finite-difference checker.
//!
//! Values are stored in a [`Real`] type (`f32` for training, `f64` for
//! high-precision gradient checks); every reduction accumulates in `f64`.

mod gradcheck;
mod kernels;
mod rng;
mod tape;

use std::fmt::Debug;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_flat, GradCheckReport};
pub use rng::{fnv1a, CounterRng, DropoutKey};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("{op}: index {index} out of range {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Storage scalar for tensors.
pub trait Real: Copy + Default + Debug + PartialEq + PartialOrd + Send + Sync + 'static {
    const NAME: &'static str;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericError::Invalid(format!("bad shape {:?}", shape)));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, NumericError> {
        Tensor::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self, NumericError> {
        Tensor::new(shape, data.iter().map(|&x| T::from_f64(x as f64)).collect())
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![T::from_f64(x)],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::default(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor; 1-D tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (self.shape[0], self.data.len() / self.shape[0]),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn item(&self) -> f64 {
        self.data[0].to_f64()
    }
}
