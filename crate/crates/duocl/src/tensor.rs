//! Dense rank-0/1/2 tensors over a generic float scalar.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// Scalar type the numeric core is generic over.
pub trait Scalar:
    Float + num_traits::FromPrimitive + num_traits::ToPrimitive + fmt::Debug + fmt::Display + 'static
{
    /// Norm threshold below which l2 normalization switches to the fixed-scale branch.
    fn degenerate_norm() -> Self {
        Self::from_f64(1e-8).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shape of a tensor: empty for scalars, one entry per axis otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(vec![])
    }

    pub fn vector(n: usize) -> Self {
        Shape(vec![n])
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape(vec![rows, cols])
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense row-major tensor of rank at most 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorOf<F> {
    shape: Shape,
    data: Vec<F>,
}

impl<F: Scalar> TensorOf<F> {
    pub fn new(shape: Shape, data: Vec<F>) -> Result<Self, TensorError> {
        if shape.rank() > 2 {
            return Err(TensorError::RankTooHigh { rank: shape.rank() });
        }
        if shape.len() != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: format!("{shape}"),
                len: data.len(),
            });
        }
        Ok(TensorOf { shape, data })
    }

    pub fn scalar(v: F) -> Self {
        TensorOf {
            shape: Shape::scalar(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        TensorOf {
            shape: Shape::vector(data.len()),
            data,
        }
    }

    /// Row-major matrix from a flat buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, TensorError> {
        Self::new(Shape::matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        TensorOf {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// The sole element of a rank-0 tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.rank(), 0);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.0[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.0[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> F {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        TensorOf {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        TensorOf {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn scale(&self, c: F) -> Self {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    /// Matrix-vector product; `self` must be rank 2, `x` rank 1 of matching length.
    pub fn matvec(&self, x: &Self) -> Self {
        debug_assert_eq!(self.rank(), 2);
        debug_assert_eq!(self.cols(), x.len());
        let data = (0..self.rows())
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x.data())
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        TensorOf {
            shape: Shape::vector(self.rows()),
            data,
        }
    }

    /// Matrix-matrix product; both operands rank 2 with matching inner dim.
    pub fn matmul2(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rank(), 2);
        debug_assert_eq!(other.rank(), 2);
        debug_assert_eq!(self.cols(), other.rows());
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for l in 0..k {
                    acc = acc + self.get2(i, l) * other.get2(l, j);
                }
                out[i * n + j] = acc;
            }
        }
        TensorOf {
            shape: Shape::matrix(m, n),
            data: out,
        }
    }

    pub fn relu(&self) -> Self {
        TensorOf {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| if v > F::zero() { v } else { F::zero() })
                .collect(),
        }
    }

    /// L2 normalization with a fixed-scale fallback for near-zero inputs.
    ///
    /// Returns the normalized tensor and whether the degenerate branch fired.
    pub fn l2_normalize(&self) -> (Self, bool) {
        let n = self.norm();
        let eps = F::degenerate_norm();
        let div = |d: F| TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v / d).collect(),
        };
        if n < eps {
            (div(eps), true)
        } else {
            (div(n), false)
        }
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &v| acc.max(v.abs()))
    }
}

/// Numerically stable softmax of a slice (max-subtraction), fresh buffer.
pub fn softmax_slice<F: Scalar>(logits: &[F]) -> Vec<F> {
    let m = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<F> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / z).collect()
}
