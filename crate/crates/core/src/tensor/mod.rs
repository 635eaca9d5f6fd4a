//! Dense row-major tensors and the primitive kernels built on them.
//!
//! Feature maps use NHWC order. Every kernel here is a pure function of its
//! inputs; the backward rules used by [`crate::autodiff`] live next to their
//! forward counterparts.

mod activation;
mod conv;
mod elementwise;
mod norm;
mod spatial;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;

pub(crate) use activation::softmax_in_place;
pub use activation::{
    gelu, gelu_backward, leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward,
    softmax_lastdim, softmax_lastdim_backward,
};
pub use conv::{
    conv1d_lastdim, conv1d_lastdim_backward, conv2d, conv2d_backward, conv_transpose2d,
    conv_transpose2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ConvGrads, Padding,
};
pub use elementwise::{
    add, concat_channels, mul, mul_channel_gate, mul_channel_gate_backward, scale, split_channels,
    split_channels_half, sub,
};
pub use norm::{layer_norm, layer_norm_backward, LayerNormCache};
pub use spatial::{
    crop_hw, global_avg_pool, global_avg_pool_backward, reflect_index, reflect_pad_hw,
    resize_bilinear, resize_bilinear_backward, Scale,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("cannot split {channels} channels into equal halves")]
    OddChannels { channels: usize },
    #[error("{op}: kernel width {width} must be odd")]
    EvenKernel { op: &'static str, width: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

/// Dense tensor with a row-major layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_shape(shape: &[usize]) -> TensorResult<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be non-empty and >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> TensorResult<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for statically known shapes.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = check_shape(&shape).expect("valid tensor shape");
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = check_shape(&shape).expect("valid tensor shape");
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Normal samples rejected outside two standard deviations.
    pub fn trunc_normal<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
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

    /// `(n, h, w, c)` of a rank-4 feature map.
    pub fn dims4(&self) -> TensorResult<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected an NHWC feature map".into(),
            }),
        }
    }

    /// Size of the innermost axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> TensorResult<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> TensorResult<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> TensorResult<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.numel())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `max |self - other|`, or an error if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> TensorResult<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Flat offset of an NHWC coordinate.
    #[inline]
    pub fn offset4(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        let [_, h, w, ch] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        ((n * h + y) * w + x) * ch + c
    }

    #[inline]
    pub fn at4(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset4(n, y, x, c)]
    }
}
