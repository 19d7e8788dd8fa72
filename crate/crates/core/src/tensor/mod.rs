//! Dense NCHW tensors, the kernels behind the network operations, a tape for
//! reverse-mode differentiation, the Adam optimizer and a seeded random source.
//!
//! A [`Tensor`] is plain data. Gradients are produced by recording operations on
//! a [`Tape`] and calling [`Tape::backward`]; the resulting [`Gradients`] are then
//! accumulated into the `grad` buffers of the parameters that were registered.

mod adam;
pub mod kernels;
mod rng;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use rng::RandomSource;
pub use tape::{Gradients, Tape, Var};

use std::fmt;

use thiserror::Error;

/// Errors raised by tensor operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(Shape),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Shape of a 4-D tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one (height, width) plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(dims: [usize; 4]) -> Self {
        Shape(dims)
    }
}

/// Dense row-major 32-bit tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every coordinate.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let shape = shape.into();
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Depthwise delta kernels of shape (channels, 1, k, k): center 1, zero elsewhere.
    pub fn identity_kernels(channels: usize, k: usize) -> Self {
        let c = k / 2;
        Tensor::from_fn([channels, 1, k, k], |_, _, y, x| if y == c && x == c { 1.0 } else { 0.0 })
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Resets the gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `delta` into the gradient buffer, creating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape,
                len: delta.len(),
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// Slice of sample `i` along the batch axis.
    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.shape.numel() / self.shape.n().max(1);
        &self.data[i * per..(i + 1) * per]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Compares data bit-for-bit (distinguishes -0.0 from 0.0, equal NaNs compare equal).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f32]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "{}",
        TensorError::NonFinite { op }
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_shape() {
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::new([1, 1, 2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
    }

    #[test]
    fn grad_buffer_tracks_shape() {
        let mut t = Tensor::zeros([2, 1, 1, 3]).with_requires_grad(true);
        assert!(t.grad().is_none());
        t.zero_grad();
        t.accumulate_grad(&[1.0; 6]).unwrap();
        t.accumulate_grad(&[1.0; 6]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0; 6]);
        assert!(t.accumulate_grad(&[1.0; 5]).is_err());
        let t = t.reshape([1, 2, 3, 1]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 6);
    }

    #[test]
    fn identity_kernel_layout() {
        let k = Tensor::identity_kernels(2, 3);
        assert_eq!(k.shape(), Shape::new(2, 1, 3, 3));
        assert_eq!(k.data()[4], 1.0);
        assert_eq!(k.data()[13], 1.0);
        assert_eq!(k.data().iter().sum::<f32>(), 2.0);
    }
}
