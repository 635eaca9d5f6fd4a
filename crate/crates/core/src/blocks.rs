//! Decoder transformer block internals and the encoder residual block.

use crate::attention::{AttnGeometry, DinaLayer};
use crate::autodiff::{Graph, ParamBuilder, Scope, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Padding;

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;
/// Width of the channel-gate 1-D convolution.
pub const LCCL_WIDTH: usize = 3;
/// Channel expansion of the feed-forward network.
pub const FFN_EXPANSION: usize = 2;

pub(crate) fn layer_norm<T: Scalar>(g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
    g.layer_norm(x, s.var("gamma")?, s.var("beta")?, T::lit(LN_EPS))
}

pub(crate) fn declare_norm<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<()> {
    b.ones("gamma", &[channels])?;
    b.zeros("beta", &[channels])
}

/// 1x1 convolution `cin -> cout` under `s`, bias optional.
pub(crate) fn pointwise<T: Scalar>(g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
    g.conv2d(x, s.var("w")?, s.opt("b"), 1, Padding::Same)
}

pub(crate) fn declare_pointwise<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    cin: usize,
    cout: usize,
    bias: bool,
) -> Result<()> {
    b.weight("w", &[1, 1, cin, cout])?;
    if bias {
        b.zeros("b", &[cout])?;
    }
    Ok(())
}

/// 3x3 depthwise convolution under `s`, bias optional.
pub(crate) fn depthwise<T: Scalar>(g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
    g.depthwise_conv2d(x, s.var("w")?, s.opt("b"), 1, Padding::Same)
}

pub(crate) fn declare_depthwise<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    channels: usize,
    bias: bool,
) -> Result<()> {
    b.weight("w", &[3, 3, channels])?;
    if bias {
        b.zeros("b", &[channels])?;
    }
    Ok(())
}

/// Local cross-channel learner: global average pool, width-3 convolution
/// across the channel sequence (no bias), sigmoid. Produces a `[N, 1, 1, C]`
/// gate in `(0, 1)`. Parameter: `w`.
pub fn lccl<T: Scalar>(g: &mut Graph<T>, s: &Scope<'_>, x_norm: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(x_norm)?;
    // NHWC already stores the pooled channels as a contiguous 1-D sequence
    let mixed = g.conv1d_lastdim(pooled, s.var("w")?)?;
    Ok(g.sigmoid(mixed))
}

/// Channel-aware self-attention: DiNA output modulated by the LCCL gate,
/// both read from the same normalized input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Casa {
    pub dina: DinaLayer,
}

impl Casa {
    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        self.dina.declare(&mut b.sub("dina"))?;
        b.sub("lccl").weight("w", &[LCCL_WIDTH])
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &Scope<'_>,
        x_norm: Var,
        geom: &AttnGeometry,
    ) -> Result<Var> {
        let att = self.dina.forward(g, &s.sub("dina"), x_norm, geom)?;
        let gate = lccl(g, &s.sub("lccl"), x_norm)?;
        g.mul_channel_gate(att, gate)
    }
}

/// Gate applied to the second half in the gated FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateFn {
    Gelu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnKind {
    /// Divide-and-multiply: `X1 * X2`, no activation.
    Dmfn,
    /// Gated-Dconv: `X1 * gelu(X2)`.
    Gdfn(GateFn),
}

/// Feed-forward network: pointwise expansion to `2C`, 3x3 depthwise,
/// channel split into halves, product. Parameters `pw.{w,b}`, `dw.{w,b}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub channels: usize,
    pub kind: FfnKind,
    pub use_bias: bool,
}

impl FeedForward {
    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        let wide = FFN_EXPANSION * self.channels;
        declare_pointwise(&mut b.sub("pw"), self.channels, wide, self.use_bias)?;
        declare_depthwise(&mut b.sub("dw"), wide, self.use_bias)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &Scope<'_>, x_norm: Var) -> Result<Var> {
        let expanded = pointwise(g, &s.sub("pw"), x_norm)?;
        let x0 = depthwise(g, &s.sub("dw"), expanded)?;
        let (x1, x2) = g.split_channels_half(x0)?;
        let gated = match self.kind {
            FfnKind::Dmfn | FfnKind::Gdfn(GateFn::Identity) => x2,
            FfnKind::Gdfn(GateFn::Gelu) => g.gelu(x2),
        };
        g.mul(x1, gated)
    }
}

/// Which dilation a decoder block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DilationTag {
    /// `δ = 1`
    Local,
    /// `δ = max(1, ⌊n / k⌋)` with `n` the shorter side of the feature map.
    Global,
}

/// Largest usable odd window for a feature map whose shorter side is `n`.
pub fn effective_kernel(kernel: usize, n: usize) -> usize {
    let fit = if n % 2 == 1 { n } else { n.saturating_sub(1) };
    kernel.min(fit.max(1))
}

impl DilationTag {
    pub fn dilation(self, height: usize, width: usize, kernel: usize) -> usize {
        match self {
            DilationTag::Local => 1,
            DilationTag::Global => {
                let n = height.min(width);
                (n / effective_kernel(kernel, n)).max(1)
            }
        }
    }
}

/// Pre-norm transformer block: `y = x + CASA(LN(x))`, `out = y + FFN(LN(y))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerBlock {
    pub channels: usize,
    pub heads: usize,
    pub kernel: usize,
    pub tag: DilationTag,
    pub ffn: FfnKind,
    pub use_bias: bool,
}

impl TransformerBlock {
    fn casa(&self) -> Casa {
        Casa {
            dina: DinaLayer {
                channels: self.channels,
                heads: self.heads,
                kernel: self.kernel,
            },
        }
    }

    fn feed_forward(&self) -> FeedForward {
        FeedForward {
            channels: self.channels,
            kind: self.ffn,
            use_bias: self.use_bias,
        }
    }

    /// Attention geometry this block uses on an `height x width` map.
    pub fn geometry(&self, height: usize, width: usize) -> Result<AttnGeometry> {
        let k = effective_kernel(self.kernel, height.min(width));
        let dilation = self.tag.dilation(height, width, self.kernel);
        AttnGeometry::new(height, width, k, dilation, self.heads, self.channels)
    }

    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        declare_norm(&mut b.sub("norm1"), self.channels)?;
        self.casa().declare(&mut b.sub("casa"))?;
        declare_norm(&mut b.sub("norm2"), self.channels)?;
        self.feed_forward().declare(&mut b.sub("ffn"))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
        let (_, h, w, _) = g.value(x).dims4()?;
        let geom = self.geometry(h, w)?;
        let n1 = layer_norm(g, &s.sub("norm1"), x)?;
        let att = self.casa().forward(g, &s.sub("casa"), n1, &geom)?;
        let y = g.add(x, att)?;
        let n2 = layer_norm(g, &s.sub("norm2"), y)?;
        let ff = self.feed_forward().forward(g, &s.sub("ffn"), n2)?;
        g.add(y, ff)
    }
}

/// Encoder residual block: `x + conv3x3(leaky_relu(conv3x3(x)))`.
/// Parameters `conv1.{w,b}`, `conv2.{w,b}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    pub channels: usize,
    pub slope: f64,
}

impl ResidualBlock {
    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        let c = self.channels;
        for name in ["conv1", "conv2"] {
            let mut sub = b.sub(name);
            sub.weight("w", &[3, 3, c, c])?;
            sub.zeros("b", &[c])?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
        let c1 = s.sub("conv1");
        let h = g.conv2d(x, c1.var("w")?, c1.opt("b"), 1, Padding::Same)?;
        let h = g.leaky_relu(h, T::lit(self.slope));
        let c2 = s.sub("conv2");
        let h = g.conv2d(h, c2.var("w")?, c2.opt("b"), 1, Padding::Same)?;
        g.add(x, h)
    }
}
