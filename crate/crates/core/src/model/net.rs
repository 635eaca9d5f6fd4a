use indexmap::IndexMap;

use super::config::ModelConfig;
use crate::autodiff::{declare, Bindings, Graph, ParamBuilder, ParamStore, Scope, Var};
use crate::blocks::{ResidualBlock, TransformerBlock};
use crate::error::{Error, Result};
use crate::fusion::{Ldff, TargetLevel};
use crate::scalar::Scalar;
use crate::tensor::{crop_hw, reflect_pad_hw, Padding, Tensor};

/// Spatial extents must be divisible by this (three stride-2 stages).
pub const SIZE_MULTIPLE: usize = 8;
/// Kernel of the stride-2 transposed-convolution upsampler.
pub const UPSAMPLE_KERNEL: usize = 4;

/// The encoder-decoder deblurring network: a configuration and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Parameter totals grouped by top-level module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub modules: IndexMap<String, usize>,
    pub total: usize,
    /// Combined size of every fusion module.
    pub fusion: usize,
}

const FUSION_MODULES: [&str; 4] = ["ldff1", "ldff2", "fuse2", "fuse1"];

fn conv<T: Scalar>(b: &mut ParamBuilder<'_, T>, kh: usize, cin: usize, cout: usize) -> Result<()> {
    b.weight("w", &[kh, kh, cin, cout])?;
    b.zeros("b", &[cout])
}

impl ModelConfig {
    fn residual(&self, level: usize) -> ResidualBlock {
        ResidualBlock {
            channels: self.channels[level],
            slope: self.leaky_slope,
        }
    }

    fn transformer(&self, level: usize, block: usize) -> TransformerBlock {
        TransformerBlock {
            channels: self.channels[level],
            heads: self.heads[level],
            kernel: self.kernel_size,
            tag: self.dilation.tag(block),
            ffn: self.ffn,
            use_bias: self.use_bias,
        }
    }

    fn multiscale_fusion(&self, level: usize) -> Ldff {
        Ldff {
            cin: self.channels.iter().sum(),
            cout: self.channels[level],
            mode: self.cfm_mode,
            use_bias: self.use_bias,
        }
    }

    fn same_scale_fusion(&self, level: usize) -> Ldff {
        Ldff {
            cin: 2 * self.channels[level],
            cout: self.channels[level],
            mode: self.cfm_mode,
            use_bias: self.use_bias,
        }
    }

    fn declare_params<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>) -> Result<()> {
        let [c1, c2, c3] = self.channels;
        conv(&mut b.sub("stem"), 3, 3, c1)?;
        for level in 0..3 {
            let mut enc = b.sub(&format!("enc{}", level + 1));
            for i in 0..self.res_blocks {
                self.residual(level)
                    .declare(&mut enc.sub(&format!("res{i}")))?;
            }
            if level < 2 {
                let cout = self.channels[level + 1];
                conv(
                    &mut b.sub(&format!("down{}", level + 1)),
                    3,
                    self.channels[level],
                    cout,
                )?;
            }
        }
        self.multiscale_fusion(0).declare(&mut b.sub("ldff1"))?;
        self.multiscale_fusion(1).declare(&mut b.sub("ldff2"))?;
        self.declare_decoder(b, 2)?;
        conv(&mut b.sub("up2"), UPSAMPLE_KERNEL, c3, c2)?;
        self.same_scale_fusion(1).declare(&mut b.sub("fuse2"))?;
        self.declare_decoder(b, 1)?;
        conv(&mut b.sub("up1"), UPSAMPLE_KERNEL, c2, c1)?;
        self.same_scale_fusion(0).declare(&mut b.sub("fuse1"))?;
        self.declare_decoder(b, 0)?;
        conv(&mut b.sub("out"), 3, c1, 3)
    }

    fn declare_decoder<T: Scalar>(&self, b: &mut ParamBuilder<'_, T>, level: usize) -> Result<()> {
        let mut dec = b.sub(&format!("dec{}", level + 1));
        for i in 0..self.blocks[level] {
            self.transformer(level, i)
                .declare(&mut dec.sub(&format!("block{i}")))?;
        }
        Ok(())
    }

    /// Dilation of every decoder block, per level, for an input of
    /// `height x width` (already a multiple of [`SIZE_MULTIPLE`]).
    pub fn dilation_schedule(&self, height: usize, width: usize) -> [Vec<usize>; 3] {
        std::array::from_fn(|level| {
            let (h, w) = (height >> level, width >> level);
            (0..self.blocks[level])
                .map(|i| self.dilation.tag(i).dilation(h, w, self.kernel_size))
                .collect()
        })
    }
}

/// Builds a model with seeded initialization.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let params = declare(seed, |b| config.declare_params(b))?;
    Ok(Model {
        config: config.clone(),
        params,
    })
}

fn apply_conv<T: Scalar>(g: &mut Graph<T>, s: &Scope<'_>, x: Var, stride: usize) -> Result<Var> {
    g.conv2d(x, s.var("w")?, s.opt("b"), stride, Padding::Same)
}

impl<T: Scalar> Model<T> {
    /// Wraps loaded parameters, checking they match the configuration exactly.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = build_model::<T>(&config, 0)?.params;
        for (name, p) in expected.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Invalid(format!("missing parameter `{name}`")))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
            return Err(Error::UnknownParameter(extra.to_string()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Records the network on `g`. `x` must be NHWC with 3 channels and
    /// spatial extents divisible by [`SIZE_MULTIPLE`].
    pub fn forward_graph(&self, g: &mut Graph<T>, bindings: &Bindings, x: Var) -> Result<Var> {
        let (_, h, w, c) = g.value(x).dims4()?;
        if c != 3 || h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Invalid(format!(
                "network input must be [N, 8a, 8b, 3], got {:?}",
                g.value(x).shape()
            )));
        }
        let cfg = &self.config;
        let root = bindings.root();

        let mut feat = apply_conv(g, &root.sub("stem"), x, 1)?;
        let mut enc = Vec::with_capacity(3);
        for level in 0..3 {
            let scope = root.sub(&format!("enc{}", level + 1));
            for i in 0..cfg.res_blocks {
                feat = cfg
                    .residual(level)
                    .forward(g, &scope.sub(&format!("res{i}")), feat)?;
            }
            enc.push(feat);
            if level < 2 {
                feat = apply_conv(g, &root.sub(&format!("down{}", level + 1)), feat, 2)?;
            }
        }
        let levels = [enc[0], enc[1], enc[2]];
        let f1 =
            cfg.multiscale_fusion(0)
                .multiscale(g, &root.sub("ldff1"), levels, TargetLevel::One)?;
        let f2 =
            cfg.multiscale_fusion(1)
                .multiscale(g, &root.sub("ldff2"), levels, TargetLevel::Two)?;

        let d3 = self.decoder(g, &root, 2, enc[2])?;
        let u2 = self.upsample(g, &root.sub("up2"), d3)?;
        let j2 = cfg
            .same_scale_fusion(1)
            .same_scale(g, &root.sub("fuse2"), u2, f2)?;
        let d2 = self.decoder(g, &root, 1, j2)?;
        let u1 = self.upsample(g, &root.sub("up1"), d2)?;
        let j1 = cfg
            .same_scale_fusion(0)
            .same_scale(g, &root.sub("fuse1"), u1, f1)?;
        let d1 = self.decoder(g, &root, 0, j1)?;
        let residual = apply_conv(g, &root.sub("out"), d1, 1)?;
        g.add(x, residual)
    }

    fn decoder(&self, g: &mut Graph<T>, root: &Scope<'_>, level: usize, mut x: Var) -> Result<Var> {
        let scope = root.sub(&format!("dec{}", level + 1));
        for i in 0..self.config.blocks[level] {
            x = self.config.transformer(level, i).forward(
                g,
                &scope.sub(&format!("block{i}")),
                x,
            )?;
        }
        Ok(x)
    }

    fn upsample(&self, g: &mut Graph<T>, s: &Scope<'_>, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, s.var("w")?, s.opt("b"), 2, 1)
    }

    /// Full-resolution estimate for images of any size: reflect-pads the
    /// bottom/right edge up to a multiple of [`SIZE_MULTIPLE`] and crops
    /// back. No range clamp.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w, _) = image.dims4()?;
        let pad = |n: usize| n.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE - n;
        let padded = reflect_pad_hw(image, pad(h), pad(w))?;
        let mut g = Graph::no_grad();
        let bindings = self.params.bind(&mut g);
        let x = g.constant(padded);
        let y = self.forward_graph(&mut g, &bindings, x)?;
        Ok(crop_hw(&g.take(y), h, w)?)
    }

    /// [`Model::forward`] clamped to `[0, 1]`.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(image)?.map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut modules = IndexMap::new();
        for (name, p) in self.params.iter() {
            let top = name.split('.').next().unwrap_or(name);
            *modules.entry(top.to_string()).or_insert(0) += p.value.numel();
        }
        let fusion = FUSION_MODULES.iter().filter_map(|m| modules.get(*m)).sum();
        ParamCount {
            total: modules.values().sum(),
            modules,
            fusion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_at_256() {
        let cfg = ModelConfig::small();
        let s = cfg.dilation_schedule(256, 256);
        assert_eq!(s[0], [1, 36, 1, 36]);
        assert_eq!(s[1], [1, 18, 1, 18, 1, 18]);
        assert_eq!(s[2], [1, 9, 1, 9, 1, 9, 1, 9]);
    }

    #[test]
    fn tiny_forward_shape() {
        let model = build_model::<f32>(&ModelConfig::tiny(), 3).unwrap();
        let x = Tensor::full([1, 27, 30, 3], 0.5f32);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 27, 30, 3]);
        assert!(y.is_finite());
    }
}
