use super::{Tensor, TensorResult};
use crate::scalar::Scalar;

#[inline]
fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn std_normal_pdf<T: Scalar>(x: T) -> T {
    T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2)
        * (-(x * x) * T::lit(0.5)).exp()
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exact GELU, `x * Phi(x)` with the erf-based Gaussian CDF.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * std_normal_cdf(v))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> TensorResult<Tensor<T>> {
    x.zip_map(dout, "gelu_backward", |v, g| {
        g * (std_normal_cdf(v) + v * std_normal_pdf(v))
    })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Takes the forward *output* `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dout: &Tensor<T>) -> TensorResult<Tensor<T>> {
    y.zip_map(dout, "sigmoid_backward", |s, g| g * s * (T::one() - s))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar>(
    x: &Tensor<T>,
    slope: T,
    dout: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    x.zip_map(dout, "leaky_relu_backward", |v, g| {
        if v >= T::zero() {
            g
        } else {
            g * slope
        }
    })
}

/// Max-subtracted softmax over the innermost axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let len = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(len) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Jacobian-vector form `y * (g - sum(g * y))`; takes the forward output `y`.
pub fn softmax_lastdim_backward<T: Scalar>(
    y: &Tensor<T>,
    dout: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    y.expect_same_shape(dout, "softmax_backward")?;
    let len = y.last_dim();
    let mut dx = dout.clone();
    for (drow, yrow) in dx.data_mut().chunks_mut(len).zip(y.data().chunks(len)) {
        let dot: T = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
        for (d, &p) in drow.iter_mut().zip(yrow) {
            *d = p * (*d - dot);
        }
    }
    Ok(dx)
}
