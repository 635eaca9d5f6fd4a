use super::{Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

/// Resampling factors used by the multi-scale fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Up2,
    Up4,
    Down2,
}

impl Scale {
    pub fn apply(self, extent: usize) -> TensorResult<usize> {
        match self {
            Scale::Up2 => Ok(extent * 2),
            Scale::Up4 => Ok(extent * 4),
            Scale::Down2 if extent.is_multiple_of(2) => Ok(extent / 2),
            Scale::Down2 => Err(TensorError::InvalidArgument {
                op: "resize_bilinear",
                reason: format!("cannot halve odd extent {extent}"),
            }),
        }
    }
}

/// Source taps `(lo, hi, frac)` for every output coordinate, half-pixel centers.
fn taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::lit(src - lo as f64))
        })
        .collect()
}

fn resize_to<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> TensorResult<Tensor<T>> {
    let (n, h, w, c) = x.dims4()?;
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                // lerp form keeps constant fields exact
                for ch in 0..c {
                    let lerp = |a: T, b: T, f: T| a + f * (b - a);
                    let top = lerp(x.at4(b, y0, x0, ch), x.at4(b, y0, x1, ch), fx);
                    let bot = lerp(x.at4(b, y1, x0, ch), x.at4(b, y1, x1, ch), fx);
                    out.push(lerp(top, bot, fy));
                }
            }
        }
    }
    Tensor::new([n, oh, ow, c], out)
}

/// Bilinear resampling with half-pixel centers (align-corners off). The
/// half-size case averages each 2x2 pair of source rows/columns.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, scale: Scale) -> TensorResult<Tensor<T>> {
    let (_, h, w, _) = x.dims4()?;
    resize_to(x, scale.apply(h)?, scale.apply(w)?)
}

pub fn resize_bilinear_backward<T: Scalar>(
    input_shape: &[usize],
    scale: Scale,
    dout: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let (n, h, w, c) = dx.dims4()?;
    let (oh, ow) = (scale.apply(h)?, scale.apply(w)?);
    if dout.shape() != [n, oh, ow, c] {
        return Err(TensorError::ShapeMismatch {
            op: "resize_bilinear_backward",
            lhs: dout.shape().to_vec(),
            rhs: vec![n, oh, ow, c],
        });
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    for b in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let corners = [
                    (y0, x0, (T::one() - fy) * (T::one() - fx)),
                    (y0, x1, (T::one() - fy) * fx),
                    (y1, x0, fy * (T::one() - fx)),
                    (y1, x1, fy * fx),
                ];
                for ch in 0..c {
                    let g = dout.at4(b, oy, ox, ch);
                    for &(yy, xx, wt) in &corners {
                        let o = dx.offset4(b, yy, xx, ch);
                        dx.data_mut()[o] += wt * g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over H and W, producing `[N, 1, 1, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (n, h, w, c) = x.dims4()?;
    let count = T::from_usize_lossy(h * w);
    let mut out = vec![T::zero(); n * c];
    for (i, pix) in x.data().chunks(c).enumerate() {
        let acc = &mut out[(i / (h * w)) * c..(i / (h * w) + 1) * c];
        for (a, &v) in acc.iter_mut().zip(pix) {
            *a += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= count);
    Tensor::new([n, 1, 1, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    dout: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let (n, h, w, c) = dx.dims4()?;
    if dout.shape() != [n, 1, 1, c] {
        return Err(TensorError::ShapeMismatch {
            op: "global_avg_pool_backward",
            lhs: dout.shape().to_vec(),
            rhs: vec![n, 1, 1, c],
        });
    }
    let inv = T::one() / T::from_usize_lossy(h * w);
    for (i, pix) in dx.data_mut().chunks_mut(c).enumerate() {
        let g = &dout.data()[(i / (h * w)) * c..(i / (h * w) + 1) * c];
        for (d, &gv) in pix.iter_mut().zip(g) {
            *d = gv * inv;
        }
    }
    Ok(dx)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`) of a
/// possibly out-of-range coordinate into `0..len`.
pub fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let period = 2 * len;
    let m = i.rem_euclid(period);
    (if m < len { m } else { period - 1 - m }) as usize
}

/// Pads H and W at the bottom/right by symmetric reflection.
pub fn reflect_pad_hw<T: Scalar>(
    x: &Tensor<T>,
    pad_h: usize,
    pad_w: usize,
) -> TensorResult<Tensor<T>> {
    let (n, h, w, c) = x.dims4()?;
    let (oh, ow) = (h + pad_h, w + pad_w);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            let sy = reflect_index(y as isize, h);
            for xx in 0..ow {
                let sx = reflect_index(xx as isize, w);
                let o = x.offset4(b, sy, sx, 0);
                out.extend_from_slice(&x.data()[o..o + c]);
            }
        }
    }
    Tensor::new([n, oh, ow, c], out)
}

/// Keeps the top-left `h x w` window.
pub fn crop_hw<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> TensorResult<Tensor<T>> {
    let (n, xh, xw, c) = x.dims4()?;
    if h > xh || w > xw || h == 0 || w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "crop_hw",
            reason: format!("cannot crop {xh}x{xw} to {h}x{w}"),
        });
    }
    let mut out = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            let o = x.offset4(b, y, 0, 0);
            out.extend_from_slice(&x.data()[o..o + w * c]);
        }
    }
    Tensor::new([n, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_are_fixed_points() {
        let x = Tensor::<f32>::full([1, 4, 6, 2], 0.3);
        for s in [Scale::Up2, Scale::Up4, Scale::Down2] {
            let y = resize_bilinear(&x, s).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.3), "{s:?}");
        }
        let round =
            resize_bilinear(&resize_bilinear(&x, Scale::Up2).unwrap(), Scale::Down2).unwrap();
        assert_eq!(round, x);
    }

    #[test]
    fn upscaled_ramp_is_monotone() {
        let x = Tensor::<f32>::new([1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, Scale::Up2).unwrap();
        assert_eq!(y.shape(), [1, 2, 4, 1]);
        assert_eq!(y.data()[..4], [0.0, 0.25, 0.75, 1.0]);
        assert_eq!(y.data()[..4], y.data()[4..]);
    }

    #[test]
    fn halving_averages_pairs() {
        let x = Tensor::<f32>::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = resize_bilinear(&x, Scale::Down2).unwrap();
        assert_eq!(y.data(), &[2.5]);
        assert!(resize_bilinear(&Tensor::<f32>::zeros([1, 3, 2, 1]), Scale::Down2).is_err());
    }

    #[test]
    fn gap_means() {
        let x = Tensor::<f32>::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full([2, 3, 5, 3], -1.25);
        let p = global_avg_pool(&c).unwrap();
        assert_eq!(p.shape(), [2, 1, 1, 3]);
        assert!(p.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn reflect_is_symmetric_about_edges() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 5, 3, 2], |i| i as f32);
        let p = reflect_pad_hw(&x, 3, 5).unwrap();
        assert_eq!(p.shape(), [1, 8, 8, 2]);
        assert_eq!(crop_hw(&p, 5, 3).unwrap(), x);
    }
}
