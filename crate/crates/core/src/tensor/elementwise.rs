use super::{Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

/// Hadamard product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Concatenates NHWC maps along channels; all other extents must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> TensorResult<Tensor<T>> {
    let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
        op: "concat_channels",
        reason: "no inputs".into(),
    })?;
    let (n, h, w, _) = first.dims4()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, ph, pw, pc) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * h * w * total);
    for pix in 0..n * h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[pix * c..(pix + 1) * c]);
        }
    }
    Tensor::new([n, h, w, total], out)
}

/// Splits an NHWC map along channels into consecutive groups of the given widths.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> TensorResult<Vec<Tensor<T>>> {
    let (n, h, w, c) = x.dims4()?;
    if widths.iter().sum::<usize>() != c || widths.contains(&0) {
        return Err(TensorError::InvalidArgument {
            op: "split_channels",
            reason: format!("widths {widths:?} do not partition {c} channels"),
        });
    }
    let mut outs: Vec<Vec<T>> = widths
        .iter()
        .map(|&k| Vec::with_capacity(n * h * w * k))
        .collect();
    for pix in x.data().chunks(c) {
        let mut start = 0;
        for (out, &k) in outs.iter_mut().zip(widths) {
            out.extend_from_slice(&pix[start..start + k]);
            start += k;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &k)| Tensor::new([n, h, w, k], d))
        .collect()
}

pub fn split_channels_half<T: Scalar>(x: &Tensor<T>) -> TensorResult<(Tensor<T>, Tensor<T>)> {
    let (_, _, _, c) = x.dims4()?;
    if c % 2 != 0 {
        return Err(TensorError::OddChannels { channels: c });
    }
    let mut parts = split_channels(x, &[c / 2, c / 2])?;
    let b = parts.pop().expect("two halves");
    let a = parts.pop().expect("two halves");
    Ok((a, b))
}

fn check_gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> TensorResult<(usize, usize, usize)> {
    let (n, h, w, c) = x.dims4()?;
    if gate.shape() != [n, 1, 1, c] {
        return Err(TensorError::ShapeMismatch {
            op: "mul_channel_gate",
            lhs: x.shape().to_vec(),
            rhs: gate.shape().to_vec(),
        });
    }
    Ok((n, h * w, c))
}

/// `x * gate` with a per-(batch, channel) gate `[N, 1, 1, C]` broadcast over H and W.
pub fn mul_channel_gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (_, hw, c) = check_gate(x, gate)?;
    let mut out = x.clone();
    for (i, pix) in out.data_mut().chunks_mut(c).enumerate() {
        let g = &gate.data()[(i / hw) * c..(i / hw + 1) * c];
        for (v, &gv) in pix.iter_mut().zip(g) {
            *v *= gv;
        }
    }
    Ok(out)
}

/// Returns `(dx, dgate)`.
pub fn mul_channel_gate_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    dout: &Tensor<T>,
) -> TensorResult<(Tensor<T>, Tensor<T>)> {
    let (_, hw, c) = check_gate(x, gate)?;
    x.expect_same_shape(dout, "mul_channel_gate_backward")?;
    let mut dx = dout.clone();
    let mut dg = Tensor::zeros(gate.shape());
    for (i, (dpix, xpix)) in dx
        .data_mut()
        .chunks_mut(c)
        .zip(x.data().chunks(c))
        .enumerate()
    {
        let base = (i / hw) * c;
        for ch in 0..c {
            dg.data_mut()[base + ch] += dpix[ch] * xpix[ch];
            dpix[ch] *= gate.data()[base + ch];
        }
    }
    Ok((dx, dg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_by_ones_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 2, 2, 3], |i| i as f32);
        assert_eq!(mul(&x, &Tensor::ones([1, 2, 2, 3])).unwrap(), x);
    }

    #[test]
    fn concat_shape_algebra_and_split_roundtrip() {
        let a = Tensor::<f32>::from_fn([2, 3, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn([2, 3, 2, 5], |i| -(i as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 3, 2, 7]);
        let parts = split_channels(&cat, &[2, 5]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);

        let x = Tensor::<f32>::from_fn([1, 2, 2, 4], |i| i as f32);
        let (l, r) = split_channels_half(&x).unwrap();
        assert_eq!(concat_channels(&[&l, &r]).unwrap(), x);
    }

    #[test]
    fn odd_split_names_channel_count() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 5]);
        let err = split_channels_half(&x).unwrap_err();
        assert_eq!(err, TensorError::OddChannels { channels: 5 });
        assert!(err.to_string().contains('5'));
    }

    #[test]
    fn gate_broadcasts_over_space() {
        let x = Tensor::<f32>::ones([2, 2, 3, 2]);
        let g = Tensor::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = mul_channel_gate(&x, &g).unwrap();
        assert_eq!(y.at4(0, 1, 2, 1), 2.0);
        assert_eq!(y.at4(1, 0, 1, 0), 3.0);
        assert!(mul_channel_gate(&x, &Tensor::ones([2, 1, 1, 3])).is_err());
    }
}
