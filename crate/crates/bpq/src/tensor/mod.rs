//! Minimal dense-tensor math with reverse-mode gradients.
//!
//! Everything the encoder needs and nothing more: matmul, elementwise ops,
//! softmax, layer normalization, GELU, axis swaps and reductions, recorded on
//! a [`GradTape`] for backpropagation. Values default to `f32`; an `f64` mode
//! exists for gradient checking.
//!
//! Determinism contract: every kernel uses a fixed summation order
//! (left-to-right over the contraction axis), so identical inputs produce
//! bit-identical outputs in a fixed build, regardless of `BPQ_THREADS`.

pub mod kernels;
pub mod tape;

pub use tape::{GradTape, Gradients, Var};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Element type for tensors: `f32` for training/inference, `f64` for
/// gradient checking.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("loss must be a scalar tensor, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. Data is shared behind an `Arc`, so clones and
/// reshapes are cheap; kernels always allocate fresh output buffers.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable payload access; clones the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        let v: &mut Vec<T> = std::sync::Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same data viewed under a new shape. No copy.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::LengthMismatch {
                len: self.numel(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality on shape and payload (`-0.0 != 0.0`, NaN never occurs
    /// under the finiteness invariant).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for &v in self.data.iter() {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| v as f64).collect()),
        }
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| v as f32).collect()),
        }
    }
}
