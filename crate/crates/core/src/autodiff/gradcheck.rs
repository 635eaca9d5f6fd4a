use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bindings, Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Coordinates checked per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    /// Denominator floor of the relative error, so that vanishing gradients
    /// are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            samples_per_tensor: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the largest error.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    /// First coordinate where a NaN appeared, if any.
    pub nan_at: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences for every trainable entry of `params`.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let bindings = params.bind(&mut g);
    let loss = f(&mut g, &bindings)?;
    let analytic = g.backward(loss)?.named();
    drop(g);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let b = store.bind(&mut g);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        nan_at: None,
        checked: 0,
        passed: true,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let grad = &analytic[&name];
        let numel = grad.numel();
        let coords: Vec<usize> = if numel <= cfg.samples_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, cfg.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            report.checked += 1;
            if numeric.is_nan() || a.is_nan() {
                report.passed = false;
                report.nan_at.get_or_insert((name.clone(), i));
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    report.passed &= report.max_rel_error <= cfg.tol;
    Ok(report)
}
