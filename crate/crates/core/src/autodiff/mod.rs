//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly as it is applied. Nodes are
//! appended in evaluation order, so the reverse of insertion order is a valid
//! topological order for the backward sweep.

mod gradcheck;
mod params;

use indexmap::IndexMap;

use crate::attention::{
    neighborhood_attention, neighborhood_attention_backward, AttnCache, AttnGeometry,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self as k, LayerNormCache, Padding, Scale, Tensor};

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{declare, Bindings, Param, ParamBuilder, ParamStore, Scope, INIT_STD};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    Conv1dLast {
        x: Var,
        w: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Softmax(Var),
    Gap(Var),
    Resize(Var, Scale),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gate {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        width: usize,
    },
    Sum(Var),
    Mean(Var),
    L1 {
        pred: Var,
        target: Var,
    },
    Charbonnier {
        pred: Var,
        target: Var,
        eps: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        geom: AttnGeometry,
        cache: AttnCache<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Eager computation record. In no-grad mode no node requires a gradient and
/// nothing can be differentiated, but the same operations run.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    named: IndexMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node; zero if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn by_name(&self, name: &str) -> Option<Tensor<T>> {
        self.named.get(name).map(|&v| self.get(v))
    }

    /// Gradient for every named parameter, in registration order.
    pub fn named(&self) -> IndexMap<String, Tensor<T>> {
        self.named
            .iter()
            .map(|(n, &v)| (n.clone(), self.get(v)))
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records values only; for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Moves a value out, leaving an empty placeholder. Use once the graph is done.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([1]))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn opt_val(&self, v: Option<Var>) -> Option<&Tensor<T>> {
        v.map(|v| self.val(v))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = k::conv2d(self.val(x), self.val(w), self.opt_val(b), stride, padding)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = k::conv_transpose2d(self.val(x), self.val(w), self.opt_val(b), stride, pad)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(
            y,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = k::depthwise_conv2d(self.val(x), self.val(w), self.opt_val(b), stride, padding)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(
            y,
            Op::Depthwise {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Zero-padded 1-D convolution along the innermost axis.
    pub fn conv1d_lastdim(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = k::conv1d_lastdim(self.val(x), self.val(w))?;
        Ok(self.push(y, Op::Conv1dLast { x, w }, &[x, w]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, cache) = k::layer_norm(self.val(x), self.val(gamma), self.val(beta), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = k::gelu(self.val(x));
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = k::sigmoid(self.val(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = k::leaky_relu(self.val(x), slope);
        self.push(y, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let y = k::softmax_lastdim(self.val(x));
        self.push(y, Op::Softmax(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = k::global_avg_pool(self.val(x))?;
        Ok(self.push(y, Op::Gap(x), &[x]))
    }

    pub fn resize(&mut self, x: Var, scale: Scale) -> Result<Var> {
        let y = k::resize_bilinear(self.val(x), scale)?;
        Ok(self.push(y, Op::Resize(x, scale), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = k::add(self.val(a), self.val(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = k::sub(self.val(a), self.val(b))?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = k::mul(self.val(a), self.val(b))?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = k::scale(self.val(x), s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    /// `x * gate` with `gate` of shape `[N, 1, 1, C]`.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let y = k::mul_channel_gate(self.val(x), self.val(gate))?;
        Ok(self.push(y, Op::Gate { x, gate }, &[x, gate]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.val(p)).collect();
        let y = k::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start + width` of an NHWC map.
    pub fn slice_channels(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let c = self.val(x).dims4()?.3;
        if width == 0 || start + width > c {
            return Err(Error::Invalid(format!(
                "channel slice {start}+{width} out of range for {c} channels"
            )));
        }
        let mut widths = vec![width];
        if start > 0 {
            widths.insert(0, start);
        }
        if start + width < c {
            widths.push(c - start - width);
        }
        let mut parts = k::split_channels(self.val(x), &widths)?;
        let y = parts.swap_remove(usize::from(start > 0));
        Ok(self.push(y, Op::Slice { x, start, width }, &[x]))
    }

    pub fn split_channels_half(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.val(x).dims4()?.3;
        if c % 2 != 0 {
            return Err(k::TensorError::OddChannels { channels: c }.into());
        }
        Ok((
            self.slice_channels(x, 0, c / 2)?,
            self.slice_channels(x, c / 2, c / 2)?,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.val(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.val(x).mean());
        self.push(y, Op::Mean(x), &[x])
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = k::sub(self.val(pred), self.val(target))?;
        let y = Tensor::scalar(d.map(|v| v.abs()).mean());
        Ok(self.push(y, Op::L1 { pred, target }, &[pred, target]))
    }

    /// Mean of `sqrt(d^2 + eps^2)`.
    pub fn charbonnier_loss(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        let d = k::sub(self.val(pred), self.val(target))?;
        let y = Tensor::scalar(d.map(|v| (v * v + eps * eps).sqrt()).mean());
        Ok(self.push(y, Op::Charbonnier { pred, target, eps }, &[pred, target]))
    }

    pub fn neighborhood_attention(
        &mut self,
        q: Var,
        kv: Var,
        v: Var,
        bias: Var,
        geom: AttnGeometry,
    ) -> Result<Var> {
        let (y, cache) = neighborhood_attention(
            self.val(q),
            self.val(kv),
            self.val(v),
            self.val(bias),
            &geom,
        )?;
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k: kv,
                v,
                bias,
                geom,
                cache,
            },
            &[q, kv, v, bias],
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let named = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.clone().map(|name| (name, Var(i))))
            .collect();
        Ok(Gradients {
            grads,
            named,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let r =
                    k::conv2d_backward(self.val(x), self.val(w), b.is_some(), stride, padding, g)?;
                self.accumulate(grads, x, r.dx)?;
                self.accumulate(grads, w, r.dw)?;
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let r = k::conv_transpose2d_backward(
                    self.val(x),
                    self.val(w),
                    b.is_some(),
                    stride,
                    pad,
                    g,
                )?;
                self.accumulate(grads, x, r.dx)?;
                self.accumulate(grads, w, r.dw)?;
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Depthwise {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let r = k::depthwise_conv2d_backward(
                    self.val(x),
                    self.val(w),
                    b.is_some(),
                    stride,
                    padding,
                    g,
                )?;
                self.accumulate(grads, x, r.dx)?;
                self.accumulate(grads, w, r.dw)?;
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Conv1dLast { x, w } => {
                let (dx, dw) = k::conv1d_lastdim_backward(self.val(x), self.val(w), g)?;
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, w, dw)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = k::layer_norm_backward(cache, self.val(*gamma), g)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *beta, db)?;
            }
            &Op::Gelu(x) => {
                let dx = k::gelu_backward(self.val(x), g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Sigmoid(x) => {
                let dx = k::sigmoid_backward(&node.value, g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::LeakyRelu(x, slope) => {
                let dx = k::leaky_relu_backward(self.val(x), slope, g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Softmax(x) => {
                let dx = k::softmax_lastdim_backward(&node.value, g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Gap(x) => {
                let dx = k::global_avg_pool_backward(self.val(x).shape(), g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Resize(x, scale) => {
                let dx = k::resize_bilinear_backward(self.val(x).shape(), scale, g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.map(|v| -v))?;
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, k::mul(g, self.val(b))?)?;
                }
                if self.needs(b) {
                    self.accumulate(grads, b, k::mul(g, self.val(a))?)?;
                }
            }
            &Op::Scale(x, s) => {
                self.accumulate(grads, x, k::scale(g, s))?;
            }
            &Op::Gate { x, gate } => {
                let (dx, dg) = k::mul_channel_gate_backward(self.val(x), self.val(gate), g)?;
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, gate, dg)?;
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).last_dim()).collect();
                for (&p, dp) in parts.iter().zip(k::split_channels(g, &widths)?) {
                    self.accumulate(grads, p, dp)?;
                }
            }
            &Op::Slice { x, start, width } => {
                let xv = self.val(x);
                let c = xv.last_dim();
                let mut dx = Tensor::zeros(xv.shape());
                for (dpix, gpix) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(width)) {
                    dpix[start..start + width].copy_from_slice(gpix);
                }
                self.accumulate(grads, x, dx)?;
            }
            &Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, x, Tensor::full(self.val(x).shape(), s))?;
            }
            &Op::Mean(x) => {
                let xv = self.val(x);
                let s = g.data()[0] / T::from_usize_lossy(xv.numel());
                self.accumulate(grads, x, Tensor::full(xv.shape(), s))?;
            }
            &Op::L1 { pred, target } => {
                let n = T::from_usize_lossy(self.val(pred).numel());
                let s = g.data()[0] / n;
                let d = k::sub(self.val(pred), self.val(target))?.map(|v| {
                    if v > T::zero() {
                        s
                    } else if v < T::zero() {
                        -s
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, target, d.map(|v| -v))?;
                self.accumulate(grads, pred, d)?;
            }
            &Op::Charbonnier { pred, target, eps } => {
                let n = T::from_usize_lossy(self.val(pred).numel());
                let s = g.data()[0] / n;
                let d = k::sub(self.val(pred), self.val(target))?
                    .map(|v| s * v / (v * v + eps * eps).sqrt());
                self.accumulate(grads, target, d.map(|v| -v))?;
                self.accumulate(grads, pred, d)?;
            }
            Op::Attention {
                q,
                k: kv,
                v,
                bias,
                geom,
                cache,
            } => {
                let r = neighborhood_attention_backward(
                    self.val(*q),
                    self.val(*kv),
                    self.val(*v),
                    self.val(*bias),
                    geom,
                    cache,
                    g,
                )?;
                self.accumulate(grads, *q, r.dq)?;
                self.accumulate(grads, *kv, r.dk)?;
                self.accumulate(grads, *v, r.dv)?;
                self.accumulate(grads, *bias, r.dbias)?;
            }
        }
        Ok(())
    }
}
