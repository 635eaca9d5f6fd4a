//! `ddnt`: self-tests, gradient checks, parameter counts, training,
//! inference, evaluation and synthetic data generation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ddnt_core::io::{read_image, write_image};
use ddnt_core::metrics::{Metric, MetricReport};
use ddnt_core::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig};
use ddnt_core::selfcheck::{gradient_suite, oracle_suite, CheckOutcome};
use ddnt_core::train::{
    baseline_psnr, heldout_psnr, load_pairs, synth_pair, synthetic_heldout, train, Blur, Loss,
    PairSample, TrainConfig, TrainData, HELDOUT_SEED_BASE,
};
use ddnt_core::{Model32, Tensor32};

#[derive(Parser)]
#[command(
    name = "ddnt",
    version,
    about = "Dilated neighborhood attention deblurring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the attention oracle, block identity and metric checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks at 64-bit precision.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative tolerance for individual blocks.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Relative tolerance for the end-to-end Tiny model.
        #[arg(long, default_value_t = 1e-3)]
        model_tol: f64,
    },
    /// Print per-module and total parameter counts.
    Paramcount {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Deblur one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a dataset directory (`blur/`, `sharp/`).
    Eval {
        /// Without a checkpoint the blurred images themselves are scored.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "psnr,ssim,hue")]
        metrics: Vec<Metric>,
        /// Also write per-image scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write synthetic blurred/sharp PPM pairs.
    Synth {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Gaussian sigma, or `lo:hi` spread evenly over the pairs.
        #[arg(long, conflicts_with = "motion")]
        sigma: Option<String>,
        /// Motion blur as `length,angle_degrees`.
        #[arg(long)]
        motion: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in configuration: s, l or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` file applied over the preset (default preset s).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self, default: &str) -> anyhow::Result<ModelConfig> {
        let name = self.preset.as_deref().unwrap_or(default);
        let base =
            ModelConfig::preset(name).ok_or_else(|| usage(format!("unknown preset `{name}`")))?;
        match &self.config {
            None => Ok(base),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ModelConfig::parse_with(&text, base)
                    .map_err(|e| usage(format!("{}: {e}", path.display())))
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory, or `synthetic`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-7)]
    lr_min: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    /// l1 or charbonnier.
    #[arg(long, default_value = "l1")]
    loss: String,
    /// Gaussian sigma range `lo:hi` for synthetic data.
    #[arg(long, default_value = "1:3")]
    sigma: String,
    /// Held-out synthetic pairs scored during synthetic training.
    #[arg(long, default_value_t = 20)]
    heldout: usize,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    /// Loss curve CSV (`step,lr,loss,psnr`).
    #[arg(long)]
    log: Option<PathBuf>,
}

/// Marks errors caused by bad arguments rather than by the work itself.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// A check suite ran to completion with failures.
#[derive(Debug)]
struct ChecksFailed(usize);

impl fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<ddnt_core::Error>() {
        Some(ddnt_core::Error::Config(_) | ddnt_core::Error::Invalid(_)) => 1,
        _ => 2,
    }
}

fn parse_range(s: &str) -> anyhow::Result<(f64, f64)> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("cannot parse `{t}` as a number")))
    };
    let (lo, hi) = match s.split_once(':') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => {
            let v = num(s)?;
            (v, v)
        }
    };
    if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
        return Err(usage(format!("bad sigma range `{s}`")));
    }
    Ok((lo, hi))
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("DDNT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        usage(format!(
            "DDNT_THREADS must be a non-negative integer, got `{raw}`"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn print_table(outcomes: &[CheckOutcome]) -> anyhow::Result<()> {
    for o in outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

fn cmd_paramcount(args: &ModelArgs) -> anyhow::Result<()> {
    let cfg = args.resolve("s")?;
    let model: Model32 = build_model(&cfg, 0)?;
    let count = model.count_parameters();
    for (name, n) in &count.modules {
        println!("{name:<10} {n:>12}");
    }
    println!("{:<10} {:>12}", "fusion", count.fusion);
    println!("{:<10} {:>12}", "total", count.total);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let model_cfg = args.model.resolve("tiny")?;
    let loss = match args.loss.as_str() {
        "l1" => Loss::L1,
        "charbonnier" => Loss::Charbonnier,
        other => {
            return Err(usage(format!(
                "unknown loss `{other}` (expected l1|charbonnier)"
            )))
        }
    };
    let cfg = TrainConfig {
        lr0: args.lr,
        lr_min: args.lr_min,
        steps: args.steps,
        batch: args.batch,
        patch: args.patch,
        seed: args.seed,
        loss,
        eval_every: args.eval_every,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let (data, heldout) = if args.data == "synthetic" {
        let sigma = parse_range(&args.sigma)?;
        let held = synthetic_heldout(args.heldout, args.patch, sigma, args.seed)?;
        (TrainData::Synthetic { sigma }, held)
    } else {
        (TrainData::Pairs(load_pairs(&args.data)?), Vec::new())
    };
    let mut model: Model32 = build_model(&model_cfg, args.seed)?;
    if !heldout.is_empty() {
        eprintln!(
            "held-out PSNR before training: {:.4} dB",
            heldout_psnr(&model, &heldout)?
        );
        eprintln!(
            "held-out PSNR of blurred input: {:.4} dB",
            baseline_psnr(&heldout)?
        );
    }
    let start = Instant::now();
    let log = train(&mut model, &data, &heldout, &cfg, |r| {
        if let Some(p) = r.psnr {
            eprintln!(
                "step {:>5}  lr {:.3e}  loss {:.6}  held-out {p:.4} dB",
                r.step + 1,
                r.lr,
                r.loss
            );
        }
    })?;
    let losses = log.losses();
    let window = losses.len().min(50);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    println!(
        "trained {} steps in {:.1} s; mean loss first {window}: {:.6}, last {window}: {:.6}",
        losses.len(),
        start.elapsed().as_secs_f64(),
        mean(&losses[..window]),
        mean(&losses[losses.len() - window..]),
    );
    save_checkpoint(&model, &args.out)?;
    if let Some(path) = &args.log {
        fs::write(path, log.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn batch1(img: Tensor32) -> anyhow::Result<Tensor32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Ok(img.reshape([1, h, w, 3])?)
}

fn deblur(model: &Model32, img: &Tensor32) -> anyhow::Result<Tensor32> {
    let shape = img.shape().to_vec();
    Ok(model.infer(&batch1(img.clone())?)?.reshape(shape)?)
}

fn cmd_infer(ckpt: &Path, input: &Path, output: &Path) -> anyhow::Result<()> {
    let model: Model32 = load_checkpoint(ckpt)?;
    let img: Tensor32 = read_image(input)?;
    write_image(&deblur(&model, &img)?, output)?;
    Ok(())
}

fn cmd_eval(
    ckpt: Option<&Path>,
    data: &Path,
    metrics: &[Metric],
    csv: Option<&Path>,
) -> anyhow::Result<()> {
    if metrics.is_empty() {
        return Err(usage("no metrics requested"));
    }
    let pairs: Vec<PairSample<f32>> = load_pairs(data)?;
    let model: Option<Model32> = ckpt.map(load_checkpoint).transpose()?;
    let mut items = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let estimate = match &model {
            Some(m) => deblur(m, &p.blurred)?,
            None => p.blurred.clone(),
        };
        items.push((p.id.clone(), estimate, p.sharp.clone()));
    }
    let report = MetricReport::evaluate(metrics, &items)?;
    print!("{}", report.to_text());
    if model.is_some() {
        let inputs: Vec<_> = pairs
            .iter()
            .map(|p| (p.id.clone(), p.blurred.clone(), p.sharp.clone()))
            .collect();
        let base = MetricReport::evaluate(metrics, &inputs)?;
        let means: Vec<String> = metrics
            .iter()
            .map(|&m| format!("{} {:.4}", m.name(), base.mean(m).unwrap_or(f64::NAN)))
            .collect();
        println!("blurred input mean: {}", means.join(", "));
    }
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn parse_motion(s: &str) -> anyhow::Result<Blur> {
    let Some((len, angle)) = s.split_once(',') else {
        return Err(usage(format!("--motion expects `length,angle`, got `{s}`")));
    };
    let length = len
        .trim()
        .parse()
        .map_err(|_| usage(format!("bad motion length `{len}`")))?;
    let angle = angle
        .trim()
        .parse()
        .map_err(|_| usage(format!("bad motion angle `{angle}`")))?;
    Ok(Blur::Motion { length, angle })
}

fn cmd_synth(
    n: usize,
    size: usize,
    sigma: Option<&str>,
    motion: Option<&str>,
    out: &Path,
    seed: u64,
) -> anyhow::Result<()> {
    if n == 0 || size == 0 {
        return Err(usage("--n and --size must be at least 1"));
    }
    let pairs = match motion {
        Some(m) => {
            let blur = parse_motion(m)?;
            (0..n)
                .map(|i| synth_pair(HELDOUT_SEED_BASE + seed * 1_000_003 + i as u64, size, blur))
                .collect::<ddnt_core::Result<Vec<PairSample<f32>>>>()?
        }
        None => synthetic_heldout(n, size, parse_range(sigma.unwrap_or("1:3"))?, seed)?,
    };
    for sub in ["blur", "sharp"] {
        fs::create_dir_all(out.join(sub))
            .with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:04}.ppm");
        write_image(&p.blurred, out.join("blur").join(&name))?;
        write_image(&p.sharp, out.join("sharp").join(&name))?;
    }
    println!("wrote {n} pairs to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Selftest { seed } => print_table(&oracle_suite(seed)?),
        Command::Gradcheck {
            seed,
            tol,
            model_tol,
        } => {
            if !(tol > 0.0 && model_tol > 0.0) {
                return Err(usage("tolerances must be positive"));
            }
            print_table(&gradient_suite(seed, tol, model_tol)?)
        }
        Command::Paramcount { model } => cmd_paramcount(&model),
        Command::Train(args) => cmd_train(&args),
        Command::Infer {
            ckpt,
            input,
            output,
        } => cmd_infer(&ckpt, &input, &output),
        Command::Eval {
            ckpt,
            data,
            metrics,
            csv,
        } => cmd_eval(ckpt.as_deref(), &data, &metrics, csv.as_deref()),
        Command::Synth {
            n,
            size,
            sigma,
            motion,
            out,
            seed,
        } => cmd_synth(n, size, sigma.as_deref(), motion.as_deref(), &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
