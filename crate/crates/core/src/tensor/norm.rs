use super::{Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

/// Per-position statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per position.
    pub rstd: Vec<T>,
}

fn check_affine<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> TensorResult<usize> {
    let c = x.last_dim();
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok(c)
}

/// Normalizes every position over the channel (innermost) axis, then applies
/// `gamma * xhat + beta`. Variance is the biased estimator.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> TensorResult<(Tensor<T>, LayerNormCache<T>)> {
    if eps.is_nan() || eps <= T::zero() {
        return Err(TensorError::InvalidArgument {
            op: "layer_norm",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let c = check_affine(x, gamma, beta)?;
    let inv_c = T::one() / T::from_usize_lossy(c);
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.numel() / c);
    for (hrow, orow) in xhat
        .data_mut()
        .chunks_mut(c)
        .zip(out.data_mut().chunks_mut(c))
    {
        let mean = hrow.iter().copied().sum::<T>() * inv_c;
        let var = hrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for ((h, o), (&g, &b)) in hrow
            .iter_mut()
            .zip(orow.iter_mut())
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *h = (*h - mean) * r;
            *o = *h * g + b;
        }
    }
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dout: &Tensor<T>,
) -> TensorResult<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.xhat.expect_same_shape(dout, "layer_norm_backward")?;
    let c = gamma.numel();
    let inv_c = T::one() / T::from_usize_lossy(c);
    let mut dx = dout.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ((drow, hrow), &r) in dx
        .data_mut()
        .chunks_mut(c)
        .zip(cache.xhat.data().chunks(c))
        .zip(&cache.rstd)
    {
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for ch in 0..c {
            dgamma[ch] += drow[ch] * hrow[ch];
            dbeta[ch] += drow[ch];
            let dh = drow[ch] * gamma.data()[ch];
            sum_dh += dh;
            sum_dh_h += dh * hrow[ch];
        }
        let mean_dh = sum_dh * inv_c;
        let mean_dh_h = sum_dh_h * inv_c;
        for ch in 0..c {
            let dh = drow[ch] * gamma.data()[ch];
            drow[ch] = r * (dh - mean_dh - hrow[ch] * mean_dh_h);
        }
    }
    Ok((dx, Tensor::new([c], dgamma)?, Tensor::new([c], dbeta)?))
}
