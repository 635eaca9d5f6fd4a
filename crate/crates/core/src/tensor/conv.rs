use rayon::prelude::*;

use super::{Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

/// Spatial padding mode. `Same` pads `(k - 1) / 2` zeros on every side and
/// therefore needs an odd kernel; at stride 1 it preserves extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    fn amount(self, op: &'static str, k: usize) -> TensorResult<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if k % 2 == 1 => Ok((k - 1) / 2),
            Padding::Same => Err(TensorError::EvenKernel { op, width: k }),
        }
    }
}

/// Gradients of a convolution with respect to input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

fn out_extent(
    op: &'static str,
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> TensorResult<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: "stride must be >= 1".into(),
        });
    }
    if input + 2 * pad < k {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("kernel {k} larger than padded input {}", input + 2 * pad),
        });
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

fn check_bias<T: Scalar>(
    op: &'static str,
    b: Option<&Tensor<T>>,
    channels: usize,
) -> TensorResult<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: b.shape().to_vec(),
                rhs: vec![channels],
            });
        }
    }
    Ok(())
}

/// Maps output coordinate `o` and tap `k` to an input coordinate, if in range.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

/// Inverse of [`tap`]: the output coordinate reading input `i` through tap `k`.
#[inline]
fn untap(i: usize, k: usize, stride: usize, pad: usize, out_extent: usize) -> Option<usize> {
    let t = (i + pad).checked_sub(k)?;
    if t % stride != 0 {
        return None;
    }
    let o = t / stride;
    (o < out_extent).then_some(o)
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
    stride: usize,
}

fn conv_geom<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> TensorResult<ConvGeom> {
    let (n, h, wd, cin) = x.dims4()?;
    let [kh, kw, wcin, cout] = match *w.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: w.shape().to_vec(),
                rhs: x.shape().to_vec(),
            })
        }
    };
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let ph = padding.amount(op, kh)?;
    let pw = padding.amount(op, kw)?;
    let oh = out_extent(op, h, kh, stride, ph)?;
    let ow = out_extent(op, wd, kw, stride, pw)?;
    Ok(ConvGeom {
        n,
        h,
        w: wd,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
        ph,
        pw,
        stride,
    })
}

/// 2-D cross-correlation. `x` is NHWC, `w` is `[kh, kw, cin, cout]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> TensorResult<Tensor<T>> {
    let g = conv_geom("conv2d", x, w, stride, padding)?;
    check_bias("conv2d", b, g.cout)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * g.cout];
    out.par_chunks_mut(g.ow * g.cout)
        .enumerate()
        .for_each(|(row, orow)| {
            let (n, oy) = (row / g.oh, row % g.oh);
            for ox in 0..g.ow {
                let o = &mut orow[ox * g.cout..(ox + 1) * g.cout];
                if let Some(b) = b {
                    o.copy_from_slice(b.data());
                }
                for ky in 0..g.kh {
                    let Some(iy) = tap(oy, ky, g.stride, g.ph, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = tap(ox, kx, g.stride, g.pw, g.w) else {
                            continue;
                        };
                        let xo = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let wo = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = xd[xo + ci];
                            let wrow = &wd[wo + ci * g.cout..wo + (ci + 1) * g.cout];
                            for (acc, &wv) in o.iter_mut().zip(wrow) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    Tensor::new([g.n, g.oh, g.ow, g.cout], out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: Padding,
    dout: &Tensor<T>,
) -> TensorResult<ConvGrads<T>> {
    let g = conv_geom("conv2d_backward", x, w, stride, padding)?;
    if dout.shape() != [g.n, g.oh, g.ow, g.cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            lhs: dout.shape().to_vec(),
            rhs: vec![g.n, g.oh, g.ow, g.cout],
        });
    }
    let xd = x.data();
    let wd = w.data();
    let gd = dout.data();

    let mut dx = vec![T::zero(); x.numel()];
    dx.par_chunks_mut(g.w * g.cin)
        .enumerate()
        .for_each(|(row, drow)| {
            let (n, iy) = (row / g.h, row % g.h);
            for ix in 0..g.w {
                let d = &mut drow[ix * g.cin..(ix + 1) * g.cin];
                for ky in 0..g.kh {
                    let Some(oy) = untap(iy, ky, g.stride, g.ph, g.oh) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ox) = untap(ix, kx, g.stride, g.pw, g.ow) else {
                            continue;
                        };
                        let go = ((n * g.oh + oy) * g.ow + ox) * g.cout;
                        let grow = &gd[go..go + g.cout];
                        let wo = (ky * g.kw + kx) * g.cin * g.cout;
                        for (ci, acc) in d.iter_mut().enumerate() {
                            let wrow = &wd[wo + ci * g.cout..wo + (ci + 1) * g.cout];
                            *acc += wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
            }
        });

    let mut dw = vec![T::zero(); w.numel()];
    let mut db = has_bias.then(|| vec![T::zero(); g.cout]);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = ((n * g.oh + oy) * g.ow + ox) * g.cout;
                let grow = &gd[go..go + g.cout];
                if let Some(db) = db.as_mut() {
                    for (a, &v) in db.iter_mut().zip(grow) {
                        *a += v;
                    }
                }
                for ky in 0..g.kh {
                    let Some(iy) = tap(oy, ky, g.stride, g.ph, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = tap(ox, kx, g.stride, g.pw, g.w) else {
                            continue;
                        };
                        let xo = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let wo = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = xd[xo + ci];
                            let dwrow = &mut dw[wo + ci * g.cout..wo + (ci + 1) * g.cout];
                            for (a, &v) in dwrow.iter_mut().zip(grow) {
                                *a += xv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dw: Tensor::new(w.shape(), dw)?,
        db: db.map(|d| Tensor::new([g.cout], d)).transpose()?,
    })
}

struct TransposeGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    pad: usize,
    stride: usize,
}

fn transpose_geom<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> TensorResult<TransposeGeom> {
    let (n, h, wd, cin) = x.dims4()?;
    let [kh, kw, wcin, cout] = match *w.shape() {
        [a, b, c, d] if c == cin => [a, b, c, d],
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            })
        }
    };
    debug_assert_eq!(wcin, cin);
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: "stride must be >= 1".into(),
        });
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("padding {pad} consumes the whole output"),
        });
    }
    Ok(TransposeGeom {
        n,
        h,
        w: wd,
        cin,
        kh,
        kw,
        cout,
        oh: full_h - 2 * pad,
        ow: full_w - 2 * pad,
        pad,
        stride,
    })
}

/// Transposed convolution (fractionally strided). Output extent is
/// `(in - 1) * stride - 2 * pad + k`; weights are `[kh, kw, cin, cout]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> TensorResult<Tensor<T>> {
    let g = transpose_geom("conv_transpose2d", x, w, stride, pad)?;
    check_bias("conv_transpose2d", b, g.cout)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * g.cout];
    out.par_chunks_mut(g.ow * g.cout)
        .enumerate()
        .for_each(|(row, orow)| {
            let (n, oy) = (row / g.oh, row % g.oh);
            for ox in 0..g.ow {
                let o = &mut orow[ox * g.cout..(ox + 1) * g.cout];
                if let Some(b) = b {
                    o.copy_from_slice(b.data());
                }
                for ky in 0..g.kh {
                    // oy = iy * stride + ky - pad
                    let Some(iy) = untap(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = untap(ox, kx, g.stride, g.pad, g.w) else {
                            continue;
                        };
                        let xo = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let wo = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = xd[xo + ci];
                            let wrow = &wd[wo + ci * g.cout..wo + (ci + 1) * g.cout];
                            for (acc, &wv) in o.iter_mut().zip(wrow) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    Tensor::new([g.n, g.oh, g.ow, g.cout], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
) -> TensorResult<ConvGrads<T>> {
    let g = transpose_geom("conv_transpose2d_backward", x, w, stride, pad)?;
    if dout.shape() != [g.n, g.oh, g.ow, g.cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d_backward",
            lhs: dout.shape().to_vec(),
            rhs: vec![g.n, g.oh, g.ow, g.cout],
        });
    }
    let xd = x.data();
    let wd = w.data();
    let gd = dout.data();

    let mut dx = vec![T::zero(); x.numel()];
    dx.par_chunks_mut(g.w * g.cin)
        .enumerate()
        .for_each(|(row, drow)| {
            let (n, iy) = (row / g.h, row % g.h);
            for ix in 0..g.w {
                let d = &mut drow[ix * g.cin..(ix + 1) * g.cin];
                for ky in 0..g.kh {
                    let Some(oy) = tap(iy, ky, g.stride, g.pad, g.oh) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ox) = tap(ix, kx, g.stride, g.pad, g.ow) else {
                            continue;
                        };
                        let go = ((n * g.oh + oy) * g.ow + ox) * g.cout;
                        let grow = &gd[go..go + g.cout];
                        let wo = (ky * g.kw + kx) * g.cin * g.cout;
                        for (ci, acc) in d.iter_mut().enumerate() {
                            let wrow = &wd[wo + ci * g.cout..wo + (ci + 1) * g.cout];
                            *acc += wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
            }
        });

    let mut dw = vec![T::zero(); w.numel()];
    for n in 0..g.n {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let xo = ((n * g.h + iy) * g.w + ix) * g.cin;
                for ky in 0..g.kh {
                    let Some(oy) = tap(iy, ky, g.stride, g.pad, g.oh) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ox) = tap(ix, kx, g.stride, g.pad, g.ow) else {
                            continue;
                        };
                        let go = ((n * g.oh + oy) * g.ow + ox) * g.cout;
                        let grow = &gd[go..go + g.cout];
                        let wo = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = xd[xo + ci];
                            let dwrow = &mut dw[wo + ci * g.cout..wo + (ci + 1) * g.cout];
                            for (a, &v) in dwrow.iter_mut().zip(grow) {
                                *a += xv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for grow in gd.chunks(g.cout) {
            for (a, &v) in db.iter_mut().zip(grow) {
                *a += v;
            }
        }
        db
    });
    Ok(ConvGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dw: Tensor::new(w.shape(), dw)?,
        db: db.map(|d| Tensor::new([g.cout], d)).transpose()?,
    })
}

fn depthwise_geom<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> TensorResult<ConvGeom> {
    let (n, h, wd, c) = x.dims4()?;
    let [kh, kw, wc] = match *w.shape() {
        [a, b, c] => [a, b, c],
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: w.shape().to_vec(),
                rhs: x.shape().to_vec(),
            })
        }
    };
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let ph = padding.amount(op, kh)?;
    let pw = padding.amount(op, kw)?;
    Ok(ConvGeom {
        n,
        h,
        w: wd,
        cin: c,
        kh,
        kw,
        cout: c,
        oh: out_extent(op, h, kh, stride, ph)?,
        ow: out_extent(op, wd, kw, stride, pw)?,
        ph,
        pw,
        stride,
    })
}

/// Channel-wise (depthwise) convolution with weights `[kh, kw, c]`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> TensorResult<Tensor<T>> {
    let g = depthwise_geom("depthwise_conv2d", x, w, stride, padding)?;
    check_bias("depthwise_conv2d", b, g.cout)?;
    let c = g.cout;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * c];
    out.par_chunks_mut(g.ow * c)
        .enumerate()
        .for_each(|(row, orow)| {
            let (n, oy) = (row / g.oh, row % g.oh);
            for ox in 0..g.ow {
                let o = &mut orow[ox * c..(ox + 1) * c];
                if let Some(b) = b {
                    o.copy_from_slice(b.data());
                }
                for ky in 0..g.kh {
                    let Some(iy) = tap(oy, ky, g.stride, g.ph, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = tap(ox, kx, g.stride, g.pw, g.w) else {
                            continue;
                        };
                        let xo = ((n * g.h + iy) * g.w + ix) * c;
                        let wo = (ky * g.kw + kx) * c;
                        for ((acc, &xv), &wv) in
                            o.iter_mut().zip(&xd[xo..xo + c]).zip(&wd[wo..wo + c])
                        {
                            *acc += xv * wv;
                        }
                    }
                }
            }
        });
    Tensor::new([g.n, g.oh, g.ow, c], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: Padding,
    dout: &Tensor<T>,
) -> TensorResult<ConvGrads<T>> {
    let g = depthwise_geom("depthwise_conv2d_backward", x, w, stride, padding)?;
    let c = g.cout;
    if dout.shape() != [g.n, g.oh, g.ow, c] {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d_backward",
            lhs: dout.shape().to_vec(),
            rhs: vec![g.n, g.oh, g.ow, c],
        });
    }
    let xd = x.data();
    let wd = w.data();
    let gd = dout.data();
    let mut dx = vec![T::zero(); x.numel()];
    dx.par_chunks_mut(g.w * c)
        .enumerate()
        .for_each(|(row, drow)| {
            let (n, iy) = (row / g.h, row % g.h);
            for ix in 0..g.w {
                let d = &mut drow[ix * c..(ix + 1) * c];
                for ky in 0..g.kh {
                    let Some(oy) = untap(iy, ky, g.stride, g.ph, g.oh) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ox) = untap(ix, kx, g.stride, g.pw, g.ow) else {
                            continue;
                        };
                        let go = ((n * g.oh + oy) * g.ow + ox) * c;
                        let wo = (ky * g.kw + kx) * c;
                        for ((acc, &gv), &wv) in
                            d.iter_mut().zip(&gd[go..go + c]).zip(&wd[wo..wo + c])
                        {
                            *acc += gv * wv;
                        }
                    }
                }
            }
        });
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = has_bias.then(|| vec![T::zero(); c]);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = ((n * g.oh + oy) * g.ow + ox) * c;
                let grow = &gd[go..go + c];
                if let Some(db) = db.as_mut() {
                    for (a, &v) in db.iter_mut().zip(grow) {
                        *a += v;
                    }
                }
                for ky in 0..g.kh {
                    let Some(iy) = tap(oy, ky, g.stride, g.ph, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = tap(ox, kx, g.stride, g.pw, g.w) else {
                            continue;
                        };
                        let xo = ((n * g.h + iy) * g.w + ix) * c;
                        let wo = (ky * g.kw + kx) * c;
                        for ((a, &xv), &gv) in
                            dw[wo..wo + c].iter_mut().zip(&xd[xo..xo + c]).zip(grow)
                        {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dw: Tensor::new(w.shape(), dw)?,
        db: db.map(|d| Tensor::new([c], d)).transpose()?,
    })
}

fn check_conv1d<T: Scalar>(w: &Tensor<T>) -> TensorResult<usize> {
    if w.rank() != 1 {
        return Err(TensorError::InvalidShape {
            shape: w.shape().to_vec(),
            reason: "conv1d weights must be rank 1".into(),
        });
    }
    let kw = w.numel();
    if kw.is_multiple_of(2) {
        return Err(TensorError::EvenKernel {
            op: "conv1d",
            width: kw,
        });
    }
    Ok((kw - 1) / 2)
}

/// Zero-padded 1-D cross-correlation along the last axis, no bias. Each
/// innermost row is filtered independently and keeps its length.
pub fn conv1d_lastdim<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let r = check_conv1d(w)?;
    let len = x.last_dim();
    let wd = w.data();
    let mut out = vec![T::zero(); x.numel()];
    for (orow, xrow) in out.chunks_mut(len).zip(x.data().chunks(len)) {
        for (i, o) in orow.iter_mut().enumerate() {
            for (j, &wv) in wd.iter().enumerate() {
                if let Some(src) = (i + j).checked_sub(r).filter(|&s| s < len) {
                    *o += wv * xrow[src];
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(dx, dw)`.
pub fn conv1d_lastdim_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
) -> TensorResult<(Tensor<T>, Tensor<T>)> {
    let r = check_conv1d(w)?;
    x.expect_same_shape(dout, "conv1d_backward")?;
    let len = x.last_dim();
    let wd = w.data();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    for ((dxrow, xrow), grow) in dx
        .chunks_mut(len)
        .zip(x.data().chunks(len))
        .zip(dout.data().chunks(len))
    {
        for (i, &gv) in grow.iter().enumerate() {
            for (j, &wv) in wd.iter().enumerate() {
                if let Some(src) = (i + j).checked_sub(r).filter(|&s| s < len) {
                    dxrow[src] += wv * gv;
                    dw[j] += xrow[src] * gv;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 3, 4, 3], |i| i as f32 * 0.1);
        let w = Tensor::from_fn([1, 1, 3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, Some(&Tensor::zeros([3])), 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn impulse_response_is_plateau() {
        let mut x = Tensor::<f32>::zeros([1, 5, 5, 1]);
        let c = x.offset4(0, 2, 2, 0);
        x.data_mut()[c] = 1.0;
        let w = Tensor::ones([3, 3, 1, 1]);
        let y = conv2d(&x, &w, None, 1, Padding::Same).unwrap();
        for yy in 0..5 {
            for xx in 0..5 {
                let expect = if (1..=3).contains(&yy) && (1..=3).contains(&xx) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(y.at4(0, yy, xx, 0), expect);
            }
        }
    }

    #[test]
    fn same_padding_output_is_ceil_of_stride() {
        let x = Tensor::<f32>::zeros([1, 7, 6, 2]);
        let w = Tensor::zeros([3, 3, 2, 4]);
        assert_eq!(
            conv2d(&x, &w, None, 2, Padding::Same).unwrap().shape(),
            [1, 4, 3, 4]
        );
        assert_eq!(
            conv2d(&x, &w, None, 1, Padding::Valid).unwrap().shape(),
            [1, 5, 4, 4]
        );
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 4, 4, 2]);
        let w = Tensor::zeros([3, 3, 3, 1]);
        let err = conv2d(&x, &w, None, 1, Padding::Same)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("[1, 4, 4, 2]") && err.contains("[3, 3, 3, 1]"),
            "{err}"
        );
    }

    #[test]
    fn depthwise_center_tap_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 4, 5, 3], |i| (i as f32).sin());
        let w = Tensor::from_fn([3, 3, 3], |i| if i / 3 == 4 { 1.0 } else { 0.0 });
        let y = depthwise_conv2d(&x, &w, Some(&Tensor::zeros([3])), 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_ones_on_constant_interior_is_nine_c() {
        let x = Tensor::<f32>::full([1, 5, 5, 2], 0.75);
        let y = depthwise_conv2d(&x, &Tensor::ones([3, 3, 2]), None, 1, Padding::Same).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(y.at4(0, yy, xx, 1), 9.0 * 0.75);
            }
        }
    }

    #[test]
    fn conv1d_examples() {
        let x = Tensor::<f32>::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ident = conv1d_lastdim(&x, &Tensor::new([3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(ident, x);
        let ones = conv1d_lastdim(&x, &Tensor::ones([3])).unwrap();
        assert_eq!(ones.data(), &[3.0, 6.0, 9.0, 7.0]);
        let zero = conv1d_lastdim(&x, &Tensor::zeros([3])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            conv1d_lastdim(&x, &Tensor::zeros([2])),
            Err(TensorError::EvenKernel { width: 2, .. })
        ));
    }

    #[test]
    fn transpose_stride_two_doubles_extent() {
        let x = Tensor::<f32>::ones([1, 3, 5, 2]);
        let w = Tensor::ones([4, 4, 2, 3]);
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), [1, 6, 10, 3]);
        // every interior output pixel receives exactly 2x2 taps
        assert_eq!(y.at4(0, 2, 4, 0), 8.0);
    }
}
