//! Dense tensors and a minimal reverse-mode autodiff engine.
//!
//! Tensors are immutable, contiguous, row-major arrays of `f32` or `f64`.
//! Operations are recorded on a [`Graph`] and differentiated by
//! [`Graph::backward`]. Broadcasting is deliberately restricted: the smaller
//! operand's shape must be a suffix of the larger one's (leading batch
//! dimensions only). Anything else is a hard shape error.

mod check;
mod graph;

pub use check::finite_difference_check;
pub use graph::{Gradients, Graph, NodeId, ParamId};

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::Arc;

use crate::rng::RngStream;

/// Scalar element type: `f32` for training runs, `f64` for oracle and
/// gradient-check runs.
pub trait Real:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const NAME: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn is_finite_val(self) -> bool;
    fn sin_val(self) -> Self;
    fn cos_val(self) -> Self;
    fn exp_val(self) -> Self;
    fn ln_val(self) -> Self;
    fn ln_1p_val(self) -> Self;
    fn sqrt_val(self) -> Self;
    fn abs_val(self) -> Self;
    fn max_val(self, other: Self) -> Self;

    /// `c = alpha * a @ b + beta * c` on row-major buffers with explicit
    /// strides. Thin wrapper over `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn is_finite_val(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn sin_val(self) -> Self {
                self.sin()
            }
            #[inline]
            fn cos_val(self) -> Self {
                self.cos()
            }
            #[inline]
            fn exp_val(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln_val(self) -> Self {
                self.ln()
            }
            #[inline]
            fn ln_1p_val(self) -> Self {
                self.ln_1p()
            }
            #[inline]
            fn sqrt_val(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs_val(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max_val(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }

            #[inline]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Errors from tensor construction and graph operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: produced a non-finite value (NaN or Inf)")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called twice on the same graph without re-running forward")]
    BackwardTwice,
    #[error("{op}: expected a scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
}

pub type TensorResult<V> = Result<V, TensorError>;

/// Immutable dense row-major tensor. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    /// Build from a flat row-major buffer. Rejects extent/length mismatch
    /// and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: "zero extent".into(),
            });
        }
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape product {} != data length {}", numel, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite_val()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec_unchecked(shape.to_vec(), vec![T::zero(); numel])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec_unchecked(shape.to_vec(), vec![value; numel])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Tensor::from_vec_unchecked(vec![], vec![value])
    }

    /// I.i.d. `Normal(0, std^2)` entries drawn from `stream`.
    pub fn randn(shape: &[usize], std: f64, stream: &mut RngStream) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(std * stream.normal()))
            .collect();
        Tensor::from_vec_unchecked(shape.to_vec(), data)
    }

    /// I.i.d. `Uniform(lo, hi)` entries drawn from `stream`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, stream: &mut RngStream) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(stream.uniform_in(lo, hi)))
            .collect();
        Tensor::from_vec_unchecked(shape.to_vec(), data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec_unchecked(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    /// Mark this tensor as a differentiable leaf when inserted into a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> TensorResult<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            })
        }
    }

    /// Same storage, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot view {} elements as {:?}", self.data.len(), shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Convert element type (used when loading f32 datasets into f64 runs).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.to_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    /// Root mean square of all elements.
    pub fn rms(&self) -> f64 {
        let ss: f64 = self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    /// Exact element-wise equality (same bits for floats of equal value).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    /// Largest absolute element-wise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape_product() {
        let err = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        let err = Tensor::<f32>::from_vec(&[1], vec![f32::INFINITY]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::<f64>::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::<f64>::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn randn_is_deterministic() {
        let mut s1 = RngStream::from_seed(3).split("t");
        let mut s2 = RngStream::from_seed(3).split("t");
        let a = Tensor::<f64>::randn(&[4, 5], 0.7, &mut s1);
        let b = Tensor::<f64>::randn(&[4, 5], 0.7, &mut s2);
        assert!(a.bit_eq(&b));
    }
}
