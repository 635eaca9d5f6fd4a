//! Dilated neighborhood attention.
//!
//! Every token attends to a `k x k` window drawn from its own dilation
//! residue class: along each axis the neighbors of position `i` are the `k`
//! class members nearest to `i`, with the window shifted inward at the
//! borders so that every token sees exactly `k` of them. Two-dimensional
//! neighborhoods are the Cartesian product of the per-axis windows.
//!
//! Relative positional biases are indexed by the neighbor offset measured
//! in dilation steps, so one `(2k - 1) x (2k - 1)` table per head serves any
//! dilation.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Graph, ParamBuilder, ParamStore, Scope, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("neighborhood size {0} must be odd and >= 1")]
    EvenKernel(usize),
    #[error("dilation must be >= 1")]
    ZeroDilation,
    #[error("axis of length {len} cannot hold {kernel} neighbors at dilation {dilation}")]
    AxisTooShort {
        len: usize,
        kernel: usize,
        dilation: usize,
    },
    #[error("token index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{channels} channels cannot be split across {heads} heads")]
    HeadSplit { channels: usize, heads: usize },
}

/// Token grid and window parameters of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeometry {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnGeometry {
    pub fn new(
        height: usize,
        width: usize,
        kernel: usize,
        dilation: usize,
        heads: usize,
        channels: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(GeometryError::HeadSplit { channels, heads }.into());
        }
        let g = Self {
            height,
            width,
            kernel,
            dilation,
            heads,
            head_dim: channels / heads,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> std::result::Result<(), GeometryError> {
        check_axis(self.height, self.kernel, self.dilation)?;
        check_axis(self.width, self.kernel, self.dilation)?;
        if self.heads == 0 || self.head_dim == 0 {
            return Err(GeometryError::HeadSplit {
                channels: self.channels(),
                heads: self.heads,
            });
        }
        Ok(())
    }
}

fn check_axis(n: usize, k: usize, dilation: usize) -> std::result::Result<(), GeometryError> {
    if k.is_multiple_of(2) {
        return Err(GeometryError::EvenKernel(k));
    }
    if dilation == 0 {
        return Err(GeometryError::ZeroDilation);
    }
    if n < k * dilation {
        return Err(GeometryError::AxisTooShort {
            len: n,
            kernel: k,
            dilation,
        });
    }
    Ok(())
}

/// Window of one token along one axis.
#[derive(Debug, Clone, PartialEq, Eq)]
struct AxisWindow {
    indices: Vec<usize>,
    /// Offset of each neighbor from the query, in dilation steps.
    steps: Vec<isize>,
}

fn axis_window(
    n: usize,
    i: usize,
    k: usize,
    dilation: usize,
) -> std::result::Result<AxisWindow, GeometryError> {
    check_axis(n, k, dilation)?;
    if i >= n {
        return Err(GeometryError::IndexOutOfRange { index: i, len: n });
    }
    let class = i % dilation;
    let members = (n - 1 - class) / dilation + 1;
    let pos = i / dilation;
    let start = pos.saturating_sub(k / 2).min(members - k);
    Ok(AxisWindow {
        indices: (0..k).map(|j| class + (start + j) * dilation).collect(),
        steps: (0..k)
            .map(|j| (start + j) as isize - pos as isize)
            .collect(),
    })
}

/// The `k` dilated neighbors of position `i` on an axis of length `n`.
pub fn neighbor_indices(n: usize, i: usize, k: usize, dilation: usize) -> Result<Vec<usize>> {
    Ok(axis_window(n, i, k, dilation)?.indices)
}

fn axis_windows(
    n: usize,
    k: usize,
    dilation: usize,
) -> std::result::Result<Vec<AxisWindow>, GeometryError> {
    (0..n).map(|i| axis_window(n, i, k, dilation)).collect()
}

/// Side length `2K - 1` of a bias table `[heads, 2K - 1, 2K - 1]`; the
/// table may be built for a larger `K` than the geometry's kernel.
fn bias_side<T: Scalar>(bias: &Tensor<T>, geom: &AttnGeometry) -> TensorResult<usize> {
    match *bias.shape() {
        [h, a, b] if h == geom.heads && a == b && a % 2 == 1 && a >= 2 * geom.kernel - 1 => Ok(a),
        _ => Err(TensorError::ShapeMismatch {
            op: "neighborhood_attention",
            lhs: bias.shape().to_vec(),
            rhs: vec![geom.heads, 2 * geom.kernel - 1, 2 * geom.kernel - 1],
        }),
    }
}

fn check_qkv<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    geom: &AttnGeometry,
) -> Result<usize> {
    geom.validate()?;
    let (n, h, w, c) = q.dims4()?;
    if (h, w, c) != (geom.height, geom.width, geom.channels()) {
        return Err(TensorError::ShapeMismatch {
            op: "neighborhood_attention",
            lhs: q.shape().to_vec(),
            rhs: vec![n, geom.height, geom.width, geom.channels()],
        }
        .into());
    }
    q.expect_same_shape(k, "neighborhood_attention")?;
    q.expect_same_shape(v, "neighborhood_attention")?;
    Ok(n)
}

/// Attention probabilities saved by the forward pass, laid out
/// `[N, H, W, heads, k*k]`.
#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    pub probs: Vec<T>,
}

/// Fused neighborhood attention over already-projected `q`, `k`, `v`
/// (NHWC, heads laid out as contiguous channel groups).
pub fn neighborhood_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &AttnGeometry,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let batch = check_qkv(q, k, v, geom)?;
    let side = bias_side(bias, geom)?;
    let center = (side / 2) as isize;
    let (h, w, c, dk, kk) = (
        geom.height,
        geom.width,
        geom.channels(),
        geom.head_dim,
        geom.kernel,
    );
    let rows = axis_windows(h, kk, geom.dilation)?;
    let cols = axis_windows(w, kk, geom.dilation)?;
    let inv_sqrt = T::one() / T::from_usize_lossy(dk).sqrt();
    let window = kk * kk;

    let mut out = vec![T::zero(); q.numel()];
    let mut probs = vec![T::zero(); batch * h * w * geom.heads * window];
    let (qd, kd, vd, bd) = (q.data(), k.data(), v.data(), bias.data());
    out.par_chunks_mut(w * c)
        .zip(probs.par_chunks_mut(w * geom.heads * window))
        .enumerate()
        .for_each(|(row, (orow, prow))| {
            let (b, y) = (row / h, row % h);
            let rw = &rows[y];
            for x in 0..w {
                let cw = &cols[x];
                let qo = ((b * h + y) * w + x) * c;
                for head in 0..geom.heads {
                    let p = &mut prow
                        [(x * geom.heads + head) * window..(x * geom.heads + head + 1) * window];
                    let qh = &qd[qo + head * dk..qo + (head + 1) * dk];
                    for (a, (&ny, &sy)) in rw.indices.iter().zip(&rw.steps).enumerate() {
                        for (bb, (&nx, &sx)) in cw.indices.iter().zip(&cw.steps).enumerate() {
                            let ko = ((b * h + ny) * w + nx) * c + head * dk;
                            let dot: T =
                                qh.iter().zip(&kd[ko..ko + dk]).map(|(&s, &t)| s * t).sum();
                            let bi = (head * side + (center + sy) as usize) * side
                                + (center + sx) as usize;
                            p[a * kk + bb] = (dot + bd[bi]) * inv_sqrt;
                        }
                    }
                    crate::tensor::softmax_in_place(p);
                    let o = &mut orow[x * c + head * dk..x * c + (head + 1) * dk];
                    for (a, &ny) in rw.indices.iter().enumerate() {
                        for (bb, &nx) in cw.indices.iter().enumerate() {
                            let wgt = p[a * kk + bb];
                            let vo = ((b * h + ny) * w + nx) * c + head * dk;
                            for (acc, &vv) in o.iter_mut().zip(&vd[vo..vo + dk]) {
                                *acc += wgt * vv;
                            }
                        }
                    }
                }
            }
        });
    Ok((Tensor::new(q.shape(), out)?, AttnCache { probs }))
}

/// Gradients of [`neighborhood_attention`].
#[derive(Debug, Clone)]
pub struct AttnGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn neighborhood_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &AttnGeometry,
    cache: &AttnCache<T>,
    dout: &Tensor<T>,
) -> Result<AttnGrads<T>> {
    let batch = check_qkv(q, k, v, geom)?;
    q.expect_same_shape(dout, "neighborhood_attention_backward")?;
    let side = bias_side(bias, geom)?;
    let center = (side / 2) as isize;
    let (h, w, c, dk, kk) = (
        geom.height,
        geom.width,
        geom.channels(),
        geom.head_dim,
        geom.kernel,
    );
    let rows = axis_windows(h, kk, geom.dilation)?;
    let cols = axis_windows(w, kk, geom.dilation)?;
    let inv_sqrt = T::one() / T::from_usize_lossy(dk).sqrt();
    let window = kk * kk;
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dout.data());

    let mut dq = vec![T::zero(); q.numel()];
    let mut dkv = vec![T::zero(); k.numel()];
    let mut dvv = vec![T::zero(); v.numel()];
    let mut db = vec![T::zero(); bias.numel()];
    let mut dlogit = vec![T::zero(); window];
    for b in 0..batch {
        for (y, rw) in rows.iter().enumerate() {
            for (x, cw) in cols.iter().enumerate() {
                let to = ((b * h + y) * w + x) * c;
                for head in 0..geom.heads {
                    let po = (((b * h + y) * w + x) * geom.heads + head) * window;
                    let p = &cache.probs[po..po + window];
                    let g = &gd[to + head * dk..to + (head + 1) * dk];
                    // dP = g . v_j, dV_j += p_j g
                    for (a, &ny) in rw.indices.iter().enumerate() {
                        for (bb, &nx) in cw.indices.iter().enumerate() {
                            let j = a * kk + bb;
                            let vo = ((b * h + ny) * w + nx) * c + head * dk;
                            dlogit[j] = g.iter().zip(&vd[vo..vo + dk]).map(|(&s, &t)| s * t).sum();
                            for (acc, &gv) in dvv[vo..vo + dk].iter_mut().zip(g) {
                                *acc += p[j] * gv;
                            }
                        }
                    }
                    let dot: T = dlogit.iter().zip(p).map(|(&s, &t)| s * t).sum();
                    for (dl, &pj) in dlogit.iter_mut().zip(p) {
                        *dl = pj * (*dl - dot) * inv_sqrt;
                    }
                    let qh = &qd[to + head * dk..to + (head + 1) * dk];
                    for (a, (&ny, &sy)) in rw.indices.iter().zip(&rw.steps).enumerate() {
                        for (bb, (&nx, &sx)) in cw.indices.iter().zip(&cw.steps).enumerate() {
                            let z = dlogit[a * kk + bb];
                            let ko = ((b * h + ny) * w + nx) * c + head * dk;
                            for (i, (&kv, &qv)) in kd[ko..ko + dk].iter().zip(qh).enumerate() {
                                dq[to + head * dk + i] += z * kv;
                                dkv[ko + i] += z * qv;
                            }
                            let bi = (head * side + (center + sy) as usize) * side
                                + (center + sx) as usize;
                            db[bi] += z;
                        }
                    }
                }
            }
        }
    }
    Ok(AttnGrads {
        dq: Tensor::new(q.shape(), dq)?,
        dk: Tensor::new(k.shape(), dkv)?,
        dv: Tensor::new(v.shape(), dvv)?,
        dbias: Tensor::new(bias.shape(), db)?,
    })
}

/// Multi-head DiNA layer: 1x1 query/key/value projections, neighborhood
/// attention with relative bias, 1x1 output projection. Parameters:
/// `q_w, q_b, k_w, v_w, v_b, out_w, out_b` and `rel_bias`. The key
/// projection has no bias: it would add `q . b` to every logit of a query
/// alike, which the softmax cancels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DinaLayer {
    pub channels: usize,
    pub heads: usize,
    /// Neighborhood size the bias table is built for.
    pub kernel: usize,
}

impl DinaLayer {
    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        let c = self.channels;
        for p in ["q", "k", "v", "out"] {
            b.weight(&format!("{p}_w"), &[1, 1, c, c])?;
            if p != "k" {
                b.zeros(&format!("{p}_b"), &[c])?;
            }
        }
        let side = 2 * self.kernel - 1;
        b.zeros("rel_bias", &[self.heads, side, side])
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &Scope<'_>,
        x: Var,
        geom: &AttnGeometry,
    ) -> Result<Var> {
        let proj = |g: &mut Graph<T>, name: &str, input: Var| -> Result<Var> {
            let w = s.var(&format!("{name}_w"))?;
            g.conv2d(input, w, s.opt(&format!("{name}_b")), 1, Padding::Same)
        };
        let q = proj(g, "q", x)?;
        let k = proj(g, "k", x)?;
        let v = proj(g, "v", x)?;
        let bias = s.var("rel_bias")?;
        let att = g.neighborhood_attention(q, k, v, bias, *geom)?;
        proj(g, "out", att)
    }
}

/// Inference-only DiNA forward over a parameter store holding a
/// [`DinaLayer`] at its root.
pub fn dina_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ParamStore<T>,
    geom: &AttnGeometry,
) -> Result<Tensor<T>> {
    let layer = DinaLayer {
        channels: geom.channels(),
        heads: geom.heads,
        kernel: geom.kernel,
    };
    let mut g = Graph::no_grad();
    let bindings = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = layer.forward(&mut g, &bindings.root(), xv, geom)?;
    Ok(g.take(out))
}

/// Projection through a `[1, 1, cin, cout]` weight by a plain matrix product.
fn project_dense<T: Scalar>(
    tokens: &[Vec<T>],
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Vec<Vec<T>> {
    let cin = w.shape()[2];
    let cout = w.shape()[3];
    tokens
        .iter()
        .map(|t| {
            (0..cout)
                .map(|o| {
                    b.map_or(T::zero(), |b| b.data()[o])
                        + (0..cin).map(|i| t[i] * w.data()[i * cout + o]).sum::<T>()
                })
                .collect()
        })
        .collect()
}

/// Reference DiNA that materializes the full `n x n` attention matrix per
/// head, with `-inf` outside each token's neighborhood. Shares no code with
/// [`neighborhood_attention`] beyond the neighborhood definition.
pub fn dense_masked_attention_oracle<T: Scalar>(
    x: &Tensor<T>,
    params: &ParamStore<T>,
    geom: &AttnGeometry,
) -> Result<Tensor<T>> {
    geom.validate()?;
    let (batch, h, w, c) = x.dims4()?;
    if (h, w, c) != (geom.height, geom.width, geom.channels()) {
        return Err(TensorError::ShapeMismatch {
            op: "dense_masked_attention_oracle",
            lhs: x.shape().to_vec(),
            rhs: vec![batch, geom.height, geom.width, geom.channels()],
        }
        .into());
    }
    let n = h * w;
    let bias = params.get("rel_bias")?;
    let side = bias.shape()[1];
    let center = (side / 2) as isize;
    let dil = geom.dilation as isize;
    let dk = geom.head_dim;
    let scale = T::one() / T::from_usize_lossy(dk).sqrt();

    // mask[i] = set of key tokens visible to query i
    let mut mask = vec![vec![false; n]; n];
    for y in 0..h {
        let ry = neighbor_indices(h, y, geom.kernel, geom.dilation)?;
        for xx in 0..w {
            let rx = neighbor_indices(w, xx, geom.kernel, geom.dilation)?;
            for &ny in &ry {
                for &nx in &rx {
                    mask[y * w + xx][ny * w + nx] = true;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(x.numel());
    for b in 0..batch {
        let tokens: Vec<Vec<T>> = (0..n)
            .map(|t| x.data()[(b * n + t) * c..(b * n + t + 1) * c].to_vec())
            .collect();
        let q = project_dense(&tokens, params.get("q_w")?, Some(params.get("q_b")?));
        let k = project_dense(&tokens, params.get("k_w")?, None);
        let v = project_dense(&tokens, params.get("v_w")?, Some(params.get("v_b")?));
        let mut heads_out = vec![vec![T::zero(); c]; n];
        for head in 0..geom.heads {
            let hs = head * dk..(head + 1) * dk;
            for i in 0..n {
                let (yi, xi) = ((i / w) as isize, (i % w) as isize);
                let mut row: Vec<T> = (0..n)
                    .map(|j| {
                        if !mask[i][j] {
                            return T::neg_infinity();
                        }
                        let (yj, xj) = ((j / w) as isize, (j % w) as isize);
                        let by = (center + (yj - yi) / dil) as usize;
                        let bx = (center + (xj - xi) / dil) as usize;
                        let dot: T = hs.clone().map(|d| q[i][d] * k[j][d]).sum();
                        (dot + bias.data()[(head * side + by) * side + bx]) * scale
                    })
                    .collect();
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let total: T = row
                    .iter_mut()
                    .map(|a| {
                        *a = (*a - m).exp();
                        *a
                    })
                    .sum();
                for d in hs.clone() {
                    heads_out[i][d] = (0..n).map(|j| row[j] / total * v[j][d]).sum();
                }
            }
        }
        let projected = project_dense(&heads_out, params.get("out_w")?, Some(params.get("out_b")?));
        out.extend(projected.into_iter().flatten());
    }
    Ok(Tensor::new(x.shape(), out)?)
}
