//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! The op set is fixed and closed: every operation the models need (matmul,
//! convolutions, attention building blocks, reductions) has a hand-written
//! backward pass, and all of them are validated against central finite
//! differences in f64. There is no graph compiler; the model zoo is small and
//! known ahead of time.

mod attention;
mod gradcheck;
mod kernels;
mod store;
mod tape;

pub use attention::{cross_attention, AttentionConfig};
pub use gradcheck::{grad_check, op_suite, GradCheckReport};
pub use kernels::{col2im, conv2d_shape, convt2d_shape, im2col, matmul, matmul_nt, transpose};
pub use store::{AdamWConfig, Bound, ParamGroup, ParamStore, Role};
pub use tape::{sigmoid, Gradients, Tape, TapeOp, Var};

use crate::error::{Error, Result};
use crate::num::Scalar;
use rand::Rng;

/// Dense row-major tensor. Values are plain data; gradients only exist for
/// tensors registered on a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform random fill in `[lo, hi)`; the standard init for linear/conv
    /// weights is `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform<R: Rng>(shape: &[usize], rng: &mut R, lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single-element accessor for scalar tensors (loss values etc.).
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// 2D accessor; debug-asserts the rank, callers guarantee bounds.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Errors out the moment a NaN/Inf appears anywhere; `what` names the
    /// producing operation for the diagnostic.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Elementwise cast between scalar precisions (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.widen())).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dot of {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut acc = T::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += *a * *b;
        }
        Ok(acc)
    }

    pub fn sq_norm(&self) -> T {
        let mut acc = T::zero();
        for v in &self.data {
            acc += *v * *v;
        }
        acc
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "axpy of {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
        Ok(())
    }
}
