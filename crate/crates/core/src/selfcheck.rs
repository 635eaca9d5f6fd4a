//! Built-in verification suites behind the `selftest` and `gradcheck`
//! commands: finite-difference gradient checks for every differentiable
//! unit, oracle comparisons, and structural identities.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dense_masked_attention_oracle, dina_forward, neighbor_indices, AttnGeometry, DinaLayer,
};
use crate::autodiff::{
    declare, grad_check, Bindings, GradCheckConfig, GradCheckReport, Graph, ParamStore, Scope, Var,
};
use crate::blocks::{
    lccl, Casa, DilationTag, FeedForward, FfnKind, GateFn, ResidualBlock, TransformerBlock,
};
use crate::error::Result;
use crate::fusion::{Cfm, CfmMode, Ecr, Ldff, TargetLevel};
use crate::metrics::{hue_distance, psnr, ssim};
use crate::model::{build_model, read_checkpoint, write_checkpoint, Model, ModelConfig};
use crate::tensor::{Padding, Scale, Tensor};

/// One line of a suite report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<24} {}", self.name, self.detail)
    }
}

/// Units covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Conv2d,
    ConvTranspose2d,
    Depthwise,
    LayerNorm,
    Softmax,
    Resize,
    L1Loss,
    Dina,
    Lccl,
    Casa,
    Dmfn,
    Gdfn,
    Ecr,
    Cfm,
    LdffMultiscale,
    LdffSameScale,
    ResidualBlock,
    TransformerBlock,
    TinyModel,
}

impl GradTarget {
    pub const ALL: [GradTarget; 19] = [
        GradTarget::Conv2d,
        GradTarget::ConvTranspose2d,
        GradTarget::Depthwise,
        GradTarget::LayerNorm,
        GradTarget::Softmax,
        GradTarget::Resize,
        GradTarget::L1Loss,
        GradTarget::Dina,
        GradTarget::Lccl,
        GradTarget::Casa,
        GradTarget::Dmfn,
        GradTarget::Gdfn,
        GradTarget::Ecr,
        GradTarget::Cfm,
        GradTarget::LdffMultiscale,
        GradTarget::LdffSameScale,
        GradTarget::ResidualBlock,
        GradTarget::TransformerBlock,
        GradTarget::TinyModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Conv2d => "conv2d",
            GradTarget::ConvTranspose2d => "conv_transpose2d",
            GradTarget::Depthwise => "depthwise_conv2d",
            GradTarget::LayerNorm => "layer_norm",
            GradTarget::Softmax => "softmax",
            GradTarget::Resize => "resize_bilinear",
            GradTarget::L1Loss => "l1_loss",
            GradTarget::Dina => "dina",
            GradTarget::Lccl => "lccl",
            GradTarget::Casa => "casa",
            GradTarget::Dmfn => "dmfn",
            GradTarget::Gdfn => "gdfn",
            GradTarget::Ecr => "ecr",
            GradTarget::Cfm => "cfm",
            GradTarget::LdffMultiscale => "ldff_multiscale",
            GradTarget::LdffSameScale => "ldff_samescale",
            GradTarget::ResidualBlock => "residual_block",
            GradTarget::TransformerBlock => "transformer_block",
            GradTarget::TinyModel => "tiny_model",
        }
    }
}

const KERNEL: usize = 3;

fn attn_geom(channels: usize, dilation: usize) -> AttnGeometry {
    AttnGeometry::new(8, 8, KERNEL, dilation, 2, channels).expect("valid test geometry")
}

/// Replaces every parameter with unit-scale random values so no check
/// runs at a degenerate point (zero biases, unit gains).
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        let gain = name.ends_with("gamma");
        for v in p.value.data_mut() {
            let r: f64 = rng.random_range(-0.5..0.5);
            *v = if gain { 1.0 + r } else { r };
        }
    }
}

/// Variance-preserving random point for a whole network: weights uniform
/// with unit-variance gain over their fan-in, biases and norms as in
/// [`randomize`]. Keeps pre-activations O(1), away from the leaky-ReLU kink.
fn randomize_fan_in(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let weight = name.ends_with(".w") || name.ends_with("_w");
        let fan_in = match shape.len() {
            // transposed 4x4 stride-2 kernels touch each output with 2x2 taps
            4 if name.starts_with("up") => shape[2] * 4,
            4 => shape[0] * shape[1] * shape[2],
            3 if weight => shape[0] * shape[1],
            1 if weight => shape[0],
            _ => 0,
        };
        let gain = name.ends_with("gamma");
        for v in p.value.data_mut() {
            *v = if weight && fan_in > 0 {
                let bound = (3.0 / fan_in as f64).sqrt();
                rng.random_range(-bound..bound)
            } else {
                let r: f64 = rng.random_range(-0.5..0.5);
                if gain {
                    1.0 + r
                } else {
                    r
                }
            };
        }
    }
}

fn insert_input(
    store: &mut ParamStore<f64>,
    name: &str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(name, Tensor::rand_uniform(shape, -1.0, 1.0, rng))
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = Tensor::rand_uniform(
        shape,
        -1.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
    );
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn var(b: &Bindings, name: &str) -> Result<Var> {
    b.root().var(name)
}

type Loss = Box<dyn Fn(&mut Graph<f64>, &Bindings) -> Result<Var>>;

fn block_store(
    seed: u64,
    rng: &mut ChaCha8Rng,
    declare_fn: impl FnOnce(&mut crate::autodiff::ParamBuilder<'_, f64>) -> Result<()>,
    inputs: &[(&str, &[usize])],
) -> Result<ParamStore<f64>> {
    let mut store = declare(seed, |b| declare_fn(&mut b.sub("m")))?;
    randomize(&mut store, rng);
    for (name, shape) in inputs {
        insert_input(&mut store, name, shape, rng)?;
    }
    Ok(store)
}

fn with_scope(
    f: impl Fn(&mut Graph<f64>, &Scope<'_>, &Bindings) -> Result<Var> + 'static,
    seed: u64,
) -> Loss {
    Box::new(move |g, b| {
        let y = f(g, &b.root().sub("m"), b)?;
        weighted_sum(g, y, seed)
    })
}

/// Parameter store (inputs included) and loss for one gradient target.
pub fn gradient_case(target: GradTarget, seed: u64) -> Result<(ParamStore<f64>, Loss)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x844: &[usize] = &[1, 8, 8, 4];
    Ok(match target {
        GradTarget::Conv2d => {
            let mut s = ParamStore::new();
            insert_input(&mut s, "x", &[1, 6, 5, 3], &mut rng)?;
            insert_input(&mut s, "w", &[3, 3, 3, 4], &mut rng)?;
            insert_input(&mut s, "b", &[4], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let y1 = g.conv2d(
                    var(b, "x")?,
                    var(b, "w")?,
                    Some(var(b, "b")?),
                    1,
                    Padding::Same,
                )?;
                let y2 = g.conv2d(var(b, "x")?, var(b, "w")?, None, 2, Padding::Valid)?;
                let l1 = weighted_sum(g, y1, seed)?;
                let l2 = weighted_sum(g, y2, seed + 1)?;
                g.add(l1, l2)
            });
            (s, f)
        }
        GradTarget::ConvTranspose2d => {
            let mut s = ParamStore::new();
            insert_input(&mut s, "x", &[1, 3, 4, 3], &mut rng)?;
            insert_input(&mut s, "w", &[4, 4, 3, 2], &mut rng)?;
            insert_input(&mut s, "b", &[2], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let y = g.conv_transpose2d(var(b, "x")?, var(b, "w")?, Some(var(b, "b")?), 2, 1)?;
                weighted_sum(g, y, seed)
            });
            (s, f)
        }
        GradTarget::Depthwise => {
            let mut s = ParamStore::new();
            insert_input(&mut s, "x", &[1, 6, 6, 4], &mut rng)?;
            insert_input(&mut s, "w", &[3, 3, 4], &mut rng)?;
            insert_input(&mut s, "b", &[4], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let y = g.depthwise_conv2d(
                    var(b, "x")?,
                    var(b, "w")?,
                    Some(var(b, "b")?),
                    1,
                    Padding::Same,
                )?;
                weighted_sum(g, y, seed)
            });
            (s, f)
        }
        GradTarget::LayerNorm => {
            let mut s = ParamStore::new();
            insert_input(&mut s, "x", &[1, 4, 4, 4], &mut rng)?;
            insert_input(&mut s, "gamma", &[4], &mut rng)?;
            insert_input(&mut s, "beta", &[4], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let y = g.layer_norm(var(b, "x")?, var(b, "gamma")?, var(b, "beta")?, 1e-5)?;
                weighted_sum(g, y, seed)
            });
            (s, f)
        }
        GradTarget::Softmax => {
            let mut s = ParamStore::new();
            insert_input(&mut s, "x", &[2, 3, 5], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let y = g.softmax_lastdim(var(b, "x")?);
                weighted_sum(g, y, seed)
            });
            (s, f)
        }
        GradTarget::Resize => {
            let mut s = ParamStore::new();
            insert_input(&mut s, "x", &[1, 4, 6, 2], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let x = var(b, "x")?;
                let mut total = None;
                for (i, sc) in [Scale::Up2, Scale::Up4, Scale::Down2]
                    .into_iter()
                    .enumerate()
                {
                    let y = g.resize(x, sc)?;
                    let l = weighted_sum(g, y, seed + i as u64)?;
                    total = Some(match total {
                        None => l,
                        Some(t) => g.add(t, l)?,
                    });
                }
                Ok(total.expect("three scales"))
            });
            (s, f)
        }
        GradTarget::L1Loss => {
            let mut s = ParamStore::new();
            insert_input(&mut s, "pred", &[1, 4, 4, 3], &mut rng)?;
            s.insert(
                "target",
                Tensor::rand_uniform([1, 4, 4, 3], -1.0, 1.0, &mut rng),
            )?;
            s.set_requires_grad("target", false)?;
            let f: Loss = Box::new(move |g, b| {
                let l1 = g.l1_loss(var(b, "pred")?, var(b, "target")?)?;
                let ch = g.charbonnier_loss(var(b, "pred")?, var(b, "target")?, 1e-3)?;
                g.add(l1, ch)
            });
            (s, f)
        }
        GradTarget::Dina => {
            let layer = DinaLayer {
                channels: 4,
                heads: 2,
                kernel: KERNEL,
            };
            let s = block_store(seed, &mut rng, |b| layer.declare(b), &[("x", x844)])?;
            let geom = attn_geom(4, 2);
            (
                s,
                with_scope(
                    move |g, m, b| layer.forward(g, m, var(b, "x")?, &geom),
                    seed,
                ),
            )
        }
        GradTarget::Lccl => {
            let s = block_store(
                seed,
                &mut rng,
                |b| b.weight("w", &[3]),
                &[("x", &[2, 3, 3, 4])],
            )?;
            (s, with_scope(move |g, m, b| lccl(g, m, var(b, "x")?), seed))
        }
        GradTarget::Casa => {
            let casa = Casa {
                dina: DinaLayer {
                    channels: 4,
                    heads: 2,
                    kernel: KERNEL,
                },
            };
            let s = block_store(seed, &mut rng, |b| casa.declare(b), &[("x", x844)])?;
            let geom = attn_geom(4, 1);
            (
                s,
                with_scope(move |g, m, b| casa.forward(g, m, var(b, "x")?, &geom), seed),
            )
        }
        GradTarget::Dmfn | GradTarget::Gdfn => {
            let kind = if target == GradTarget::Dmfn {
                FfnKind::Dmfn
            } else {
                FfnKind::Gdfn(GateFn::Gelu)
            };
            let ffn = FeedForward {
                channels: 4,
                kind,
                use_bias: true,
            };
            let s = block_store(seed, &mut rng, |b| ffn.declare(b), &[("x", &[1, 5, 5, 4])])?;
            (
                s,
                with_scope(move |g, m, b| ffn.forward(g, m, var(b, "x")?), seed),
            )
        }
        GradTarget::Ecr => {
            let ecr = Ecr {
                cin: 5,
                cout: 3,
                use_bias: true,
            };
            let s = block_store(seed, &mut rng, |b| ecr.declare(b), &[("x", &[1, 5, 5, 5])])?;
            (
                s,
                with_scope(move |g, m, b| ecr.forward(g, m, var(b, "x")?), seed),
            )
        }
        GradTarget::Cfm => {
            let cfm = Cfm {
                channels: 4,
                mode: CfmMode::Project,
                use_bias: true,
            };
            let split = Cfm {
                mode: CfmMode::Split,
                ..cfm
            };
            let mut s = declare(seed, |b| {
                cfm.declare(&mut b.sub("m"))?;
                split.declare(&mut b.sub("s"))
            })?;
            randomize(&mut s, &mut rng);
            insert_input(&mut s, "x", &[1, 5, 5, 4], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let x = var(b, "x")?;
                let y = cfm.forward(g, &b.root().sub("m"), x)?;
                let z = split.forward(g, &b.root().sub("s"), x)?;
                let l1 = weighted_sum(g, y, seed)?;
                let l2 = weighted_sum(g, z, seed + 1)?;
                g.add(l1, l2)
            });
            (s, f)
        }
        GradTarget::LdffMultiscale => {
            let ldff = |cout| Ldff {
                cin: 2 + 3 + 4,
                cout,
                mode: CfmMode::Project,
                use_bias: true,
            };
            let (l1, l2) = (ldff(2), ldff(3));
            let mut s = declare(seed, |b| {
                l1.declare(&mut b.sub("one"))?;
                l2.declare(&mut b.sub("two"))
            })?;
            randomize(&mut s, &mut rng);
            insert_input(&mut s, "e1", &[1, 8, 8, 2], &mut rng)?;
            insert_input(&mut s, "e2", &[1, 4, 4, 3], &mut rng)?;
            insert_input(&mut s, "e3", &[1, 2, 2, 4], &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let e = [var(b, "e1")?, var(b, "e2")?, var(b, "e3")?];
                let y1 = l1.multiscale(g, &b.root().sub("one"), e, TargetLevel::One)?;
                let y2 = l2.multiscale(g, &b.root().sub("two"), e, TargetLevel::Two)?;
                let a = weighted_sum(g, y1, seed)?;
                let c = weighted_sum(g, y2, seed + 1)?;
                g.add(a, c)
            });
            (s, f)
        }
        GradTarget::LdffSameScale => {
            let ldff = Ldff {
                cin: 6,
                cout: 3,
                mode: CfmMode::Project,
                use_bias: true,
            };
            let s = block_store(
                seed,
                &mut rng,
                |b| ldff.declare(b),
                &[("a", &[1, 4, 4, 3]), ("b", &[1, 4, 4, 3])],
            )?;
            (
                s,
                with_scope(
                    move |g, m, b| ldff.same_scale(g, m, var(b, "a")?, var(b, "b")?),
                    seed,
                ),
            )
        }
        GradTarget::ResidualBlock => {
            let blk = ResidualBlock {
                channels: 3,
                slope: 0.2,
            };
            let s = block_store(seed, &mut rng, |b| blk.declare(b), &[("x", &[1, 5, 5, 3])])?;
            (
                s,
                with_scope(move |g, m, b| blk.forward(g, m, var(b, "x")?), seed),
            )
        }
        GradTarget::TransformerBlock => {
            let blk = |tag| TransformerBlock {
                channels: 4,
                heads: 2,
                kernel: KERNEL,
                tag,
                ffn: FfnKind::Dmfn,
                use_bias: true,
            };
            let (local, global) = (blk(DilationTag::Local), blk(DilationTag::Global));
            let mut s = declare(seed, |b| {
                local.declare(&mut b.sub("m"))?;
                global.declare(&mut b.sub("n"))
            })?;
            randomize(&mut s, &mut rng);
            insert_input(&mut s, "x", x844, &mut rng)?;
            let f: Loss = Box::new(move |g, b| {
                let y = local.forward(g, &b.root().sub("m"), var(b, "x")?)?;
                let y = global.forward(g, &b.root().sub("n"), y)?;
                weighted_sum(g, y, seed)
            });
            (s, f)
        }
        GradTarget::TinyModel => {
            let model: Model<f64> = build_model(&ModelConfig::tiny(), seed)?;
            let mut s = model.params.clone();
            randomize_fan_in(&mut s, &mut rng);
            let model = Model::from_parts(model.config, s.clone())?;
            s.insert(
                "input",
                Tensor::rand_uniform([1, 16, 16, 3], 0.0, 1.0, &mut rng),
            )?;
            let f: Loss = Box::new(move |g, b| {
                let y = model.forward_graph(g, b, var(b, "input")?)?;
                weighted_sum(g, y, seed)
            });
            (s, f)
        }
    })
}

/// Finite-difference check of one target. The end-to-end model uses `model_tol`.
pub fn check_gradient(
    target: GradTarget,
    seed: u64,
    tol: f64,
    model_tol: f64,
) -> Result<GradCheckReport> {
    let (store, loss) = gradient_case(target, seed)?;
    let cfg = GradCheckConfig {
        tol: if target == GradTarget::TinyModel {
            model_tol
        } else {
            tol
        },
        seed,
        ..GradCheckConfig::default()
    };
    grad_check(&store, loss, &cfg)
}

pub fn gradient_suite(seed: u64, tol: f64, model_tol: f64) -> Result<Vec<CheckOutcome>> {
    GradTarget::ALL
        .iter()
        .map(|&t| {
            let r = check_gradient(t, seed, tol, model_tol)?;
            let mut detail = format!(
                "max rel err {:.2e} over {} coords",
                r.max_rel_error, r.checked
            );
            if let (Some((name, i)), Some((a, n))) = (&r.worst, r.worst_values) {
                detail.push_str(&format!(" (worst {name}[{i}]: {a:.6e} vs {n:.6e})"));
            }
            if let Some((name, i)) = &r.nan_at {
                detail.push_str(&format!(", NaN at {name}[{i}]"));
            }
            Ok(CheckOutcome {
                name: t.name().to_string(),
                passed: r.passed,
                detail,
            })
        })
        .collect()
}

fn outcome(name: &str, err: f64, tol: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed: err <= tol,
        detail: format!("max abs err {err:.2e} (tol {tol:.0e})"),
    }
}

fn flag(name: &str, ok: bool, detail: impl Into<String>) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed: ok,
        detail: detail.into(),
    }
}

/// Runs `f` on a no-grad graph holding `store`, returning the output value.
pub fn eval_block(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    f: impl FnOnce(&mut Graph<f64>, &Scope<'_>, Var) -> Result<Var>,
) -> Result<Tensor<f64>> {
    let mut g = Graph::no_grad();
    let b = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = f(&mut g, &b.root(), xv)?;
    Ok(g.take(y))
}

/// Random DiNA cases against the dense masked oracle.
pub fn dina_oracle_check(cases: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let n_h = rng.random_range(6..=16);
        let n_w = rng.random_range(6..=16);
        let k = if rng.random_bool(0.5) { 3 } else { 5 };
        let heads = rng.random_range(1..=2);
        let channels = heads * rng.random_range(1..=3);
        let n = n_h.min(n_w);
        let dilation = match rng.random_range(0..3) {
            0 => 1,
            1 => 2,
            _ => n / k,
        }
        .clamp(1, n / k);
        let geom = AttnGeometry::new(n_h, n_w, k, dilation, heads, channels)?;
        let layer = DinaLayer {
            channels,
            heads,
            kernel: k,
        };
        let mut store = declare::<f64>(rng.random(), |b| layer.declare(b))?;
        randomize(&mut store, &mut rng);
        let x = Tensor::rand_uniform([1, n_h, n_w, channels], -1.0, 1.0, &mut rng);
        let fast = dina_forward(&x, &store, &geom)?;
        let slow = dense_masked_attention_oracle(&x, &store, &geom)?;
        worst64 = worst64.max(fast.max_abs_diff(&slow)?);
        let (x32, s32) = (x.cast::<f32>(), store.cast::<f32>());
        let fast32 = dina_forward(&x32, &s32, &geom)?.cast::<f64>();
        worst32 = worst32.max(fast32.max_abs_diff(&slow)?);
    }
    Ok((worst32, worst64))
}

/// Oracle comparisons and structural identities.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (e32, e64) = dina_oracle_check(40, seed)?;
    out.push(outcome("dina_vs_oracle_f32", e32, 1e-5));
    out.push(outcome("dina_vs_oracle_f64", e64, 1e-10));

    let examples = [
        (neighbor_indices(7, 3, 7, 1)?, vec![0, 1, 2, 3, 4, 5, 6]),
        (neighbor_indices(8, 0, 3, 1)?, vec![0, 1, 2]),
        (neighbor_indices(12, 5, 3, 4)?, vec![1, 5, 9]),
    ];
    out.push(flag(
        "neighbor_examples",
        examples.iter().all(|(a, b)| a == b),
        "n=7/k=7, n=8 left border, n=12 dilation 4",
    ));

    // LCCL on channel means [1, 2, 3, 4] with w = [1, 1, 1]
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new([3], vec![1.0, 1.0, 1.0])?)?;
    let x = Tensor::from_fn([1, 2, 2, 4], |i| (i % 4 + 1) as f64);
    let gate = eval_block(&s, &x, lccl)?;
    let expect = Tensor::new(
        [1, 1, 1, 4],
        [3.0f64, 6.0, 9.0, 7.0]
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .to_vec(),
    )?;
    out.push(outcome("lccl_example", gate.max_abs_diff(&expect)?, 1e-12));

    let casa = Casa {
        dina: DinaLayer {
            channels: 4,
            heads: 2,
            kernel: 3,
        },
    };
    let mut s = declare::<f64>(seed, |b| casa.declare(b))?;
    randomize(&mut s, &mut rng);
    s.zero_prefix("lccl.");
    let x = Tensor::rand_uniform([1, 8, 8, 4], -1.0, 1.0, &mut rng);
    let geom = attn_geom(4, 2);
    let y = eval_block(&s, &x, |g, sc, x| casa.forward(g, sc, x, &geom))?;
    let mut dina_store = ParamStore::new();
    for (name, p) in s.iter() {
        if let Some(rest) = name.strip_prefix("dina.") {
            dina_store.insert(rest, p.value.clone())?;
        }
    }
    let half = dina_forward(&x, &dina_store, &geom)?.map(|v| 0.5 * v);
    out.push(outcome(
        "casa_zero_gate_half",
        y.max_abs_diff(&half)?,
        1e-12,
    ));

    let ffn = FeedForward {
        channels: 4,
        kind: FfnKind::Dmfn,
        use_bias: false,
    };
    let mut s = declare::<f64>(seed, |b| ffn.declare(b))?;
    randomize(&mut s, &mut rng);
    let x = Tensor::rand_uniform([1, 5, 5, 4], -1.0, 1.0, &mut rng);
    let base = eval_block(&s, &x, |g, sc, x| ffn.forward(g, sc, x))?;
    let mut worst: f64 = 0.0;
    for alpha in [0.5, 2.0] {
        let y = eval_block(&s, &x.map(|v| alpha * v), |g, sc, x| ffn.forward(g, sc, x))?;
        worst = worst.max(y.max_abs_diff(&base.map(|v| alpha * alpha * v))? / (alpha * alpha));
    }
    out.push(outcome("dmfn_homogeneity", worst, 1e-6));

    let ident = FeedForward {
        kind: FfnKind::Gdfn(GateFn::Identity),
        ..ffn
    };
    let y = eval_block(&s, &x, |g, sc, x| ident.forward(g, sc, x))?;
    out.push(outcome(
        "gdfn_identity_is_dmfn",
        y.max_abs_diff(&base)?,
        0.0,
    ));

    let x = Tensor::rand_uniform([1, 8, 8, 4], -1.0, 1.0, &mut rng);
    let blk = TransformerBlock {
        channels: 4,
        heads: 2,
        kernel: 3,
        tag: DilationTag::Global,
        ffn: FfnKind::Dmfn,
        use_bias: true,
    };
    let mut s = declare::<f64>(seed, |b| blk.declare(b))?;
    randomize(&mut s, &mut rng);
    s.zero_prefix("casa.dina.out");
    s.zero_prefix("ffn.dw");
    let y = eval_block(&s, &x, |g, sc, x| blk.forward(g, sc, x))?;
    out.push(outcome(
        "transformer_zero_branches",
        y.max_abs_diff(&x)?,
        0.0,
    ));

    let res = ResidualBlock {
        channels: 4,
        slope: 0.2,
    };
    let mut s = declare::<f64>(seed, |b| res.declare(b))?;
    randomize(&mut s, &mut rng);
    s.zero_prefix("conv2");
    let y = eval_block(&s, &x, |g, sc, x| res.forward(g, sc, x))?;
    out.push(outcome("residual_zero_branch", y.max_abs_diff(&x)?, 0.0));

    let cfm = Cfm {
        channels: 4,
        mode: CfmMode::Project,
        use_bias: true,
    };
    let mut s = declare::<f64>(seed, |b| cfm.declare(b))?;
    randomize(&mut s, &mut rng);
    s.zero_prefix("a.");
    s.zero_prefix("merge.b");
    s.zero_prefix("dw.b");
    let y = eval_block(&s, &x, |g, sc, x| cfm.forward(g, sc, x))?;
    out.push(outcome("cfm_zero_branches", y.max_abs_diff(&x)?, 0.0));

    let mut model: Model<f64> = build_model(&ModelConfig::tiny(), seed)?;
    model.params.zero_prefix("out.");
    let img = Tensor::rand_uniform([1, 24, 24, 3], 0.0, 1.0, &mut rng);
    out.push(outcome(
        "model_global_residual",
        model.forward(&img)?.max_abs_diff(&img)?,
        0.0,
    ));

    let model: Model<f32> = build_model(&ModelConfig::tiny(), seed)?;
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).map_err(crate::Error::from)?;
    let back: Model<f32> = read_checkpoint(bytes.as_slice()).map_err(crate::Error::from)?;
    out.push(flag(
        "checkpoint_round_trip",
        back == model,
        format!("{} bytes", bytes.len()),
    ));

    let a = Tensor::<f64>::rand_uniform([16, 16, 3], 0.2, 0.8, &mut rng);
    let b = a.map(|v| v - 0.1);
    let p = psnr(&a, &b)?;
    out.push(outcome("psnr_uniform_0.1", (p - 20.0).abs(), 1e-9));
    out.push(outcome("ssim_self", (ssim(&a, &a)? - 1.0).abs(), 0.0));
    let red = Tensor::from_fn([4, 4, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let cyan = red.map(|v| 1.0 - v);
    out.push(outcome(
        "hue_red_cyan",
        (hue_distance(&red, &cyan)? - 100.0).abs(),
        1e-12,
    ));
    let c = Tensor::<f64>::rand_uniform([16, 16, 3], 0.0, 1.0, &mut rng);
    let sym = (psnr(&a, &c)? - psnr(&c, &a)?)
        .abs()
        .max((ssim(&a, &c)? - ssim(&c, &a)?).abs())
        .max((hue_distance(&a, &c)? - hue_distance(&c, &a)?).abs());
    out.push(outcome("metric_symmetry", sym, 1e-12));
    Ok(out)
}
