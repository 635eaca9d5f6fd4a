//! Optimizer, schedule, data and the training loop.

mod data;
mod optim;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use data::{
    blur_image, load_pairs, random_crop, synth_pair, synth_sharp, Blur, DataError, PairSample,
};
pub use optim::{clip_global_norm, cosine_lr, Adam, AdamConfig};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Charbonnier smoothing constant.
pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    L1,
    Charbonnier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub loss: Loss,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Held-out PSNR is measured every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            lr_min: 1e-7,
            steps: 500,
            batch: 2,
            patch: 32,
            seed: 0,
            loss: Loss::L1,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_min && self.lr_min < self.lr0) {
            return Err(Error::Invalid(format!(
                "learning rates must satisfy 0 < final ({}) < initial ({})",
                self.lr_min, self.lr0
            )));
        }
        if self.steps == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::Invalid(
                "steps, batch and patch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Where training batches come from.
#[derive(Debug, Clone)]
pub enum TrainData {
    /// Fresh synthetic pairs every step, Gaussian sigma drawn from the range.
    Synthetic { sigma: (f64, f64) },
    /// Random crops of loaded pairs.
    Pairs(Vec<PairSample<f32>>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `step,lr,loss,psnr` lines; psnr is empty on steps without evaluation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,psnr\n");
        for r in &self.records {
            let _ = write!(s, "{},{:e},{:.8}", r.step, r.lr, r.loss);
            match r.psnr {
                Some(p) => {
                    let _ = writeln!(s, ",{p:.4}");
                }
                None => s.push_str(",\n"),
            }
        }
        s
    }
}

/// Stacks `[H, W, 3]` images into `[N, H, W, 3]`.
pub fn stack<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        first.expect_same_shape(img, "stack")?;
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(shape, data)?)
}

/// One optimization step on a batch. Returns the loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam,
    blurred: Tensor<T>,
    sharp: Tensor<T>,
    lr: f64,
    loss: Loss,
    clip_norm: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bindings = model.params.bind(&mut g);
    let x = g.constant(blurred);
    let target = g.constant(sharp);
    let y = model.forward_graph(&mut g, &bindings, x)?;
    let l = match loss {
        Loss::L1 => g.l1_loss(y, target)?,
        Loss::Charbonnier => g.charbonnier_loss(y, target, T::lit(CHARBONNIER_EPS))?,
    };
    let value = g.value(l).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss {value}")));
    }
    let mut grads = g.backward(l)?.named();
    clip_global_norm(&mut grads, clip_norm);
    adam.step(&mut model.params, &grads, lr);
    Ok(value)
}

/// Mean PSNR of the model's clamped output against the sharp images.
pub fn heldout_psnr(model: &Model<f32>, pairs: &[PairSample<f32>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut total = 0.0;
    for p in pairs {
        let (h, w) = (p.blurred.shape()[0], p.blurred.shape()[1]);
        let x = p.blurred.clone().reshape([1, h, w, 3])?;
        let y = model.infer(&x)?.reshape([h, w, 3])?;
        total += psnr(&y, &p.sharp)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean PSNR of the blurred inputs themselves.
pub fn baseline_psnr(pairs: &[PairSample<f32>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DataError::Empty.into());
    }
    let total: f64 = pairs
        .iter()
        .map(|p| psnr(&p.blurred, &p.sharp))
        .sum::<Result<f64>>()?;
    Ok(total / pairs.len() as f64)
}

/// Seeds used for synthetic training pairs never collide with these.
pub const HELDOUT_SEED_BASE: u64 = 1 << 40;

/// Held-out synthetic pairs with Gaussian sigma spread evenly over `sigma`.
pub fn synthetic_heldout(
    count: usize,
    size: usize,
    sigma: (f64, f64),
    seed: u64,
) -> Result<Vec<PairSample<f32>>> {
    (0..count)
        .map(|i| {
            let t = if count > 1 {
                i as f64 / (count - 1) as f64
            } else {
                0.5
            };
            let s = sigma.0 + t * (sigma.1 - sigma.0);
            synth_pair(
                HELDOUT_SEED_BASE + seed * 1_000_003 + i as u64,
                size,
                Blur::Gaussian { sigma: s },
            )
        })
        .collect()
}

/// Trains `model` in place. `on_step` sees every record as it is produced.
pub fn train(
    model: &mut Model<f32>,
    data: &TrainData,
    heldout: &[PairSample<f32>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if let TrainData::Pairs(p) = data {
        if p.is_empty() {
            return Err(DataError::Empty.into());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut blurred = Vec::with_capacity(cfg.batch);
        let mut sharp = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let pair = match data {
                TrainData::Synthetic { sigma } => {
                    let s = if sigma.1 > sigma.0 {
                        rng.random_range(sigma.0..=sigma.1)
                    } else {
                        sigma.0
                    };
                    let seed = rng.random_range(0..HELDOUT_SEED_BASE);
                    let pair = synth_pair(seed, cfg.patch, Blur::Gaussian { sigma: s })?;
                    random_crop(&pair, cfg.patch, &mut rng)?
                }
                TrainData::Pairs(pairs) => random_crop(
                    &pairs[rng.random_range(0..pairs.len())],
                    cfg.patch,
                    &mut rng,
                )?,
            };
            blurred.push(pair.blurred);
            sharp.push(pair.sharp);
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr0, cfg.lr_min);
        let loss = train_step(
            model,
            &mut adam,
            stack(&blurred.iter().collect::<Vec<_>>())?,
            stack(&sharp.iter().collect::<Vec<_>>())?,
            lr,
            cfg.loss,
            cfg.clip_norm,
        )?;
        let last = step + 1 == cfg.steps;
        let psnr = if !heldout.is_empty()
            && cfg.eval_every > 0
            && ((step + 1) % cfg.eval_every == 0 || last)
        {
            Some(heldout_psnr(model, heldout)?)
        } else {
            None
        };
        let rec = StepRecord {
            step,
            lr,
            loss,
            psnr,
        };
        on_step(&rec);
        log.records.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_schedule() {
        let cfg = TrainConfig {
            lr_min: 3e-4,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_header() {
        let log = TrainLog {
            records: vec![StepRecord {
                step: 0,
                lr: 2e-4,
                loss: 0.5,
                psnr: None,
            }],
        };
        assert_eq!(log.to_csv(), "step,lr,loss,psnr\n0,2e-4,0.50000000,\n");
    }
}
