use std::collections::HashMap;
use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::autodiff::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    let t = step.min(total) as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name and kept in f64.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
    ) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !p.requires_grad {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w -= T::lit(update);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut IndexMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 1e-7), 2e-4);
        assert!((cosine_lr(100, 100, 2e-4, 1e-7) - 1e-7).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 2e-4, 1e-7) - 1.0005e-4).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = IndexMap::new();
        g.insert(
            "a".to_string(),
            Tensor::new([2], vec![3.0f64, 4.0]).unwrap(),
        );
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }
}
