//! Dense row-major `f32` tensors.
//!
//! Convolution kernels use the `(n, s, s, m)` axis order throughout the crate:
//! input channels, kernel height, kernel width, output channels.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("expected a rank-{expected} tensor, got shape {actual}")]
    RankMismatch { expected: usize, actual: Shape },
    #[error("kernel spatial axes must be square, got shape {0}")]
    NonSquareKernel(Shape),
    #[error("expected unit spatial axes, got shape {0}")]
    NotPooled(Shape),
    #[error("shape {0} has a zero extent")]
    ZeroExtent(Shape),
    #[error("shape {shape} holds {expected} elements but {actual} were supplied")]
    DataLength { shape: Shape, expected: usize, actual: usize },
    #[error("non-finite scale factor {0}")]
    NonFiniteScale(f32),
    #[error("spatial extent must be positive")]
    ZeroSpatial,
}

/// Ordered list of positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = Shape(dims.into());
        if shape.0.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        Ok(shape)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(n, s, m)` for a square rank-4 kernel shape.
    pub fn kernel_dims(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.0.as_slice() {
            [n, kh, kw, m] if kh == kw => Ok((*n, *kh, *m)),
            [_, _, _, _] => Err(TensorError::NonSquareKernel(self.clone())),
            _ => Err(TensorError::RankMismatch { expected: 4, actual: self.clone() }),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength { expected: shape.numel(), actual: data.len(), shape });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let data = vec![0.0; shape.numel()];
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        let data = vec![value; shape.numel()];
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, TensorError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f32) -> Result<Tensor, TensorError> {
        if !k.is_finite() {
            return Err(TensorError::NonFiniteScale(k));
        }
        Ok(Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&a| k * a).collect() })
    }

    /// Collapses every `s × s` plane of an `(n, s, s, m)` kernel to its mean,
    /// giving shape `(n, 1, 1, m)`.
    ///
    /// Each mean is a left-to-right `f64` sum in row-major order divided by the
    /// integer count `s·s`, so pooling a constant plane returns the constant.
    pub fn spatial_mean_pool(&self) -> Result<Tensor, TensorError> {
        let (n, s, m) = self.shape.kernel_dims()?;
        let count = (s * s) as f64;
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let mut sum = 0.0f64;
                for a in 0..s {
                    for b in 0..s {
                        sum += self.data[((i * s + a) * s + b) * m + j] as f64;
                    }
                }
                out.push((sum / count) as f32);
            }
        }
        // Row-major (n, 1, 1, m) is index i * m + j, which is the push order.
        Ok(Tensor { shape: Shape(vec![n, 1, 1, m]), data: out })
    }

    /// Inverse-shape companion of [`Tensor::spatial_mean_pool`]: fills each
    /// `s × s` plane with the pooled value.
    pub fn broadcast_expand(&self, s: usize) -> Result<Tensor, TensorError> {
        if s == 0 {
            return Err(TensorError::ZeroSpatial);
        }
        let (n, m) = match self.shape.dims() {
            [n, 1, 1, m] => (*n, *m),
            [_, _, _, _] => return Err(TensorError::NotPooled(self.shape.clone())),
            _ => return Err(TensorError::RankMismatch { expected: 4, actual: self.shape.clone() }),
        };
        let mut out = vec![0.0f32; n * s * s * m];
        for i in 0..n {
            for a in 0..s {
                for b in 0..s {
                    let dst = ((i * s + a) * s + b) * m;
                    out[dst..dst + m].copy_from_slice(&self.data[i * m..(i + 1) * m]);
                }
            }
        }
        Ok(Tensor { shape: Shape(vec![n, s, s, m]), data: out })
    }
}
