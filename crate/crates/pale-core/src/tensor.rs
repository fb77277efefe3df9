//! Dense rank-4 tensors in `(batch, height, width, channels)` layout.
//!
//! Row-major `b -> h -> w -> c` ordering is load-bearing: interlaced row and
//! column gathers become strided copies, and channel slices of a token are
//! contiguous. Matrices ride in the same type as `(1, rows, 1, cols)`, and
//! convolution kernels as `(kh, kw, cin_per_group, cout)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

use crate::{Error, Result};

/// Scalar type for all numeric work: `f32` by default, `f64` for gradient
/// checks. Extends [`num_traits::Float`] with the exact error function
/// needed by the erf-form GELU.
pub trait Real: Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn erf(self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Extents of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(b: usize, h: usize, w: usize, c: usize) -> Self {
        Self { b, h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.b * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, b: usize, y: usize, x: usize, ch: usize) -> usize {
        debug_assert!(b < self.b && y < self.h && x < self.w && ch < self.c);
        ((b * self.h + y) * self.w + x) * self.c + ch
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.h, self.w, self.c)
    }
}

/// Dense rank-4 tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape} implies {} values, got {}", shape.len(), data.len()),
            });
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![T::zero(); shape.len()], grad: None }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()], grad: None }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.b {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for ch in 0..shape.c {
                        data.push(f(b, y, x, ch));
                    }
                }
            }
        }
        Self { shape, data, grad: None }
    }

    /// A `rows x cols` matrix as a `(1, rows, 1, cols)` tensor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(1, rows, 1, cols), data)
    }

    /// A length-`c` vector as a `(1, 1, 1, c)` tensor.
    pub fn vector(data: Vec<T>) -> Self {
        let c = data.len();
        Self { shape: Shape::new(1, 1, 1, c), data, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Shape::new(1, 1, 1, 1), data: vec![value], grad: None }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, ch: usize) -> T {
        self.data[self.shape.index(b, y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, ch: usize, value: T) {
        let i = self.shape.index(b, y, x, ch);
        self.data[i] = value;
    }

    /// The gradient buffer, if one has been attached.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.shape.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::set_grad",
                detail: format!("grad length {} vs shape {}", grad.len(), self.shape),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        let mut worst = T::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (*a - *b).abs();
            if d > worst {
                worst = d;
            }
        }
        worst
    }

    /// Convert element-wise via `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 4), 4);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.len(), 120);
    }

    #[test]
    fn new_rejects_wrong_length() {
        let r = Tensor::<f32>::new(Shape::new(1, 2, 2, 1), alloc::vec![0.0; 3]);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn grad_slot_matches_shape() {
        let mut t = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 1));
        assert!(t.set_grad(alloc::vec![1.0; 4]).is_ok());
        assert!(t.set_grad(alloc::vec![1.0; 5]).is_err());
        assert_eq!(t.grad().unwrap().len(), 4);
    }
}
