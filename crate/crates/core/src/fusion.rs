//! Multi-level feature fusion: channel reduction followed by gated mixing.

use crate::autodiff::{Graph, ParamBuilder, Scope, Var};
use crate::blocks::{
    declare_depthwise, declare_norm, declare_pointwise, depthwise, layer_norm, pointwise,
};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Scale, TensorError};

/// How the mixing stage forms its two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfmMode {
    /// Two 1x1 projections of the full normalized input.
    Project,
    /// Each branch projects one channel half.
    Split,
}

/// Efficient channel reduction: 1x1 `cin -> cout`, then 3x3 depthwise.
/// Parameters `pw.{w,b}`, `dw.{w,b}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ecr {
    pub cin: usize,
    pub cout: usize,
    pub use_bias: bool,
}

impl Ecr {
    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        declare_pointwise(&mut b.sub("pw"), self.cin, self.cout, self.use_bias)?;
        declare_depthwise(&mut b.sub("dw"), self.cout, self.use_bias)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
        let r = pointwise(g, &s.sub("pw"), x)?;
        depthwise(g, &s.sub("dw"), r)
    }
}

/// Complementary feature mixing with a residual skip:
/// `x + dw3x3(pw(a(LN x) * gelu(b(LN x))))`.
/// Parameters `norm`, `a`, `b`, `merge`, `dw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cfm {
    pub channels: usize,
    pub mode: CfmMode,
    pub use_bias: bool,
}

impl Cfm {
    fn branch_width(&self) -> (usize, usize) {
        match self.mode {
            CfmMode::Project => (self.channels, self.channels),
            CfmMode::Split => (self.channels / 2, self.channels / 2),
        }
    }

    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        if self.mode == CfmMode::Split && self.channels % 2 == 1 {
            return Err(TensorError::OddChannels {
                channels: self.channels,
            }
            .into());
        }
        let (cin, width) = self.branch_width();
        let c = self.channels;
        declare_norm(&mut b.sub("norm"), c)?;
        declare_pointwise(&mut b.sub("a"), cin, width, self.use_bias)?;
        declare_pointwise(&mut b.sub("b"), cin, width, self.use_bias)?;
        declare_pointwise(&mut b.sub("merge"), width, c, self.use_bias)?;
        declare_depthwise(&mut b.sub("dw"), c, self.use_bias)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
        let xn = layer_norm(g, &s.sub("norm"), x)?;
        let (xa, xb) = match self.mode {
            CfmMode::Project => (xn, xn),
            CfmMode::Split => g.split_channels_half(xn)?,
        };
        let a = pointwise(g, &s.sub("a"), xa)?;
        let b = pointwise(g, &s.sub("b"), xb)?;
        let b = g.gelu(b);
        let merged = g.mul(a, b)?;
        let m = pointwise(g, &s.sub("merge"), merged)?;
        let m = depthwise(g, &s.sub("dw"), m)?;
        g.add(x, m)
    }
}

/// Which encoder level the multi-scale fusion produces features for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetLevel {
    One,
    Two,
}

/// Fusion of resized multi-level features: resize, concatenate, ECR, CFM.
/// Parameters `ecr.*`, `cfm.*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ldff {
    pub cin: usize,
    pub cout: usize,
    pub mode: CfmMode,
    pub use_bias: bool,
}

impl Ldff {
    fn ecr(&self) -> Ecr {
        Ecr {
            cin: self.cin,
            cout: self.cout,
            use_bias: self.use_bias,
        }
    }

    fn cfm(&self) -> Cfm {
        Cfm {
            channels: self.cout,
            mode: self.mode,
            use_bias: self.use_bias,
        }
    }

    pub fn declare<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        self.ecr().declare(&mut b.sub("ecr"))?;
        self.cfm().declare(&mut b.sub("cfm"))
    }

    fn reduce_and_mix<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &Scope<'_>,
        parts: &[Var],
    ) -> Result<Var> {
        let cat = g.concat_channels(parts)?;
        let r = self.ecr().forward(g, &s.sub("ecr"), cat)?;
        self.cfm().forward(g, &s.sub("cfm"), r)
    }

    /// Fuses three encoder outputs at spatial ratio `1 : 1/2 : 1/4` into
    /// the resolution of `target`.
    pub fn multiscale<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &Scope<'_>,
        levels: [Var; 3],
        target: TargetLevel,
    ) -> Result<Var> {
        let [e1, e2, e3] = levels;
        check_pyramid(g, levels)?;
        let parts = match target {
            TargetLevel::One => [e1, g.resize(e2, Scale::Up2)?, g.resize(e3, Scale::Up4)?],
            TargetLevel::Two => [g.resize(e1, Scale::Down2)?, e2, g.resize(e3, Scale::Up2)?],
        };
        self.reduce_and_mix(g, s, &parts)
    }

    /// Fuses two maps of the same resolution.
    pub fn same_scale<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &Scope<'_>,
        a: Var,
        b: Var,
    ) -> Result<Var> {
        self.reduce_and_mix(g, s, &[a, b])
    }
}

fn check_pyramid<T: Scalar>(g: &Graph<T>, levels: [Var; 3]) -> Result<()> {
    let dims: Vec<_> = levels
        .iter()
        .map(|&v| g.value(v).dims4())
        .collect::<std::result::Result<_, _>>()?;
    let (n, h, w, _) = dims[0];
    let ok = h % 4 == 0
        && w % 4 == 0
        && dims[1].0 == n
        && dims[2].0 == n
        && (dims[1].1, dims[1].2) == (h / 2, w / 2)
        && (dims[2].1, dims[2].2) == (h / 4, w / 4);
    if ok {
        Ok(())
    } else {
        let shapes: Vec<_> = levels
            .iter()
            .map(|&v| g.value(v).shape().to_vec())
            .collect();
        Err(TensorError::InvalidArgument {
            op: "ldff_multiscale",
            reason: format!("levels must have spatial ratio 1 : 1/2 : 1/4, got {shapes:?}"),
        }
        .into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::declare;
    use crate::error::Error;
    use crate::tensor::Tensor;

    #[test]
    fn multiscale_rejects_bad_ratio() {
        let ldff = Ldff {
            cin: 3,
            cout: 2,
            mode: CfmMode::Project,
            use_bias: true,
        };
        let params = declare::<f64>(0, |b| ldff.declare(b)).unwrap();
        let mut g = Graph::no_grad();
        let bind = params.bind(&mut g);
        let e1 = g.constant(Tensor::zeros([1, 8, 8, 1]));
        let e2 = g.constant(Tensor::zeros([1, 4, 4, 1]));
        let e3 = g.constant(Tensor::zeros([1, 4, 4, 1]));
        let err = ldff.multiscale(&mut g, &bind.root(), [e1, e2, e3], TargetLevel::One);
        assert!(matches!(
            err,
            Err(Error::Tensor(TensorError::InvalidArgument { .. }))
        ));
    }

    #[test]
    fn split_mode_needs_even_channels() {
        let cfm = Cfm {
            channels: 3,
            mode: CfmMode::Split,
            use_bias: true,
        };
        assert!(declare::<f32>(0, |b| cfm.declare(b)).is_err());
    }
}
