//! Dense tensor arithmetic with explicit per-op backward functions.
//!
//! Storage is 32-bit IEEE-754 in the training path (`Tensor<f32>`); every
//! reduction (dot products, softmax sums, norms) accumulates in 64 bits.
//! The same kernels are generic over the element type so oracle code and the
//! finite-difference gradient checker can run the identical computation in
//! `f64`.

pub mod gradcheck;
pub mod ops;

use crate::error::{Error, Result};

pub use gradcheck::finite_diff_check;

/// Element type for tensor math: `f32` for the artifact, `f64` for oracles.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + Send + Sync + std::fmt::Debug + 'static
{
    fn f64(self) -> f64;
    fn of(x: f64) -> Self;
}

impl Real for f32 {
    fn f64(self) -> f64 {
        self as f64
    }
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn f64(self) -> f64 {
        self
    }
    fn of(x: f64) -> Self {
        x
    }
}

/// Dense row-major tensor. Immutable once produced by an op; the few
/// in-place paths (gradient accumulation, optimizer updates) go through
/// `data_mut`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![R::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![R::of(value); numel],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| R::of(x)).collect())
    }

    /// 2-D constructor from nested rows; handy in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend(r.iter().map(|&x| R::of(x)));
        }
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    /// Number of rows when the tensor is viewed as [rows x last-dim].
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("scalar tensor has no last dim")
    }

    pub fn row(&self, i: usize) -> &[R] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        let n = self.last_dim();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> R {
        self.data[i * self.last_dim() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Tensor<R> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise in-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor<R>) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        let a = R::of(alpha);
        for (x, &y) in self.data.iter_mut().zip(other.data.iter()) {
            *x = *x + a * y;
        }
    }

    pub fn fill(&mut self, value: f64) {
        let v = R::of(value);
        for x in self.data.iter_mut() {
            *x = v;
        }
    }

    /// Precision conversion (exact when widening f32 -> f64).
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::of(x.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<R>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// A trainable value paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<R: Real = f32> {
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
}

impl<R: Real> Parameter<R> {
    pub fn new(value: Tensor<R>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}
