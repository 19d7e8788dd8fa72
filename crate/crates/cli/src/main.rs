//! `adafm`: train, adapt, study, bridge, fit-curve, restore, eval and serve.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

mod config;

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use adafm_core::data::{load_pnm, save_pnm, DegradationLevel, Image, PatchSampler, Task};
use adafm_core::modulation::{best_lambda, default_order, fit_curve, load_curve, predict_lambda, save_curve, ModulationPoint};
use adafm_core::net::{load_checkpoint, save_checkpoint, AppliedLambda, Checkpoint, Model, NetConfig};
use adafm_core::pipeline::{
    self, evaluate, filter_bridge, load_image_dir, reports_to_csv, restore_image, AdaptationStudy, BridgeConfig, Dataset,
    EvalSet, LogEntry, Modulated, StudyConfig, TrainConfig,
};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use config::Resolver;

#[derive(Debug, Parser)]
#[command(name = "adafm", version, about = "Continuous-level image restoration with AdaFM layers")]
struct Cli {
    /// `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a basic network on one degradation level.
    Train(TrainArgs),
    /// Insert AdaFM layers into a basic network and adapt them to a second level.
    Adapt(AdaptArgs),
    /// Adapted-vs-scratch PSNR distances for pairs of levels.
    Study(StudyArgs),
    /// Fit depthwise filters mapping one basic network's filters onto another's.
    Bridge(BridgeArgs),
    /// Find the best λ per level and fit a level → λ curve.
    FitCurve(FitCurveArgs),
    /// Restore one PGM/PPM image.
    Restore(RestoreArgs),
    /// Mean PSNR on an evaluation set.
    Eval(EvalArgs),
    /// Serve modulated restorations over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct Schedule {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// 0 disables the ×0.1 decay.
    #[arg(long)]
    lr_decay_step: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory of PGM/PPM training images; procedural images when absent.
    #[arg(long)]
    train_dir: Option<String>,
    /// Directory of PGM/PPM evaluation images; procedural images when absent.
    #[arg(long)]
    eval_dir: Option<String>,
}

#[derive(Debug, Args)]
struct NetArgs {
    /// Image channels (1 or 3) for procedural data.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    feat: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    task: Option<Task>,
    /// σ in [0, 1] for denoising, scale ≥ 1 for super-resolution.
    #[arg(long, allow_negative_numbers = true)]
    level: Option<f64>,
    /// Level on the 0–255 scale (σ15 → 15).
    #[arg(long, conflicts_with = "level")]
    level_8bit: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    schedule: Schedule,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, allow_negative_numbers = true)]
    level_b: Option<f64>,
    #[arg(long, conflicts_with = "level_b")]
    level_b_8bit: Option<f64>,
    /// Odd AdaFM filter size; 1 for denoising and 5 for SR by default.
    #[arg(long, value_parser = parse_odd)]
    adafm_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    schedule: Schedule,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[arg(long)]
    task: Option<Task>,
    /// Comma-separated `start:end` level pairs, e.g. `0.05:0.3,0.3:0.05`.
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long, value_parser = parse_odd)]
    adafm_k: Option<usize>,
    #[arg(long)]
    adapt_iterations: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f32>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    schedule: Schedule,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct BridgeArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_parser = parse_odd)]
    kernel: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Evaluation level; the target checkpoint's level by default.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct FitCurveArgs {
    #[arg(long)]
    net: PathBuf,
    /// `L_a,…,L_b`: first and last are the endpoints, the rest are fitted.
    #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
    levels: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with = "levels")]
    levels_8bit: Vec<f64>,
    /// Polynomial order; linear for ≤ 3 interior levels, cubic otherwise.
    #[arg(long)]
    order: Option<usize>,
    /// λ grid step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    eval_dir: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["lambda", "level", "level_8bit"]))]
struct RestoreArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, requires = "curve", allow_negative_numbers = true)]
    level: Option<f64>,
    #[arg(long, requires = "curve")]
    level_8bit: Option<f64>,
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    net: PathBuf,
    /// Modulation coefficient for AdaFM checkpoints; 1 by default.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    task: Option<Task>,
    /// Evaluation level; the checkpoint's level by default.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long, conflicts_with = "level")]
    level_8bit: Option<f64>,
    #[arg(long)]
    eval_dir: Option<String>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = adafm_service::DEFAULT_MAX_SIDE)]
    max_width: usize,
    #[arg(long, default_value_t = adafm_service::DEFAULT_MAX_SIDE)]
    max_height: usize,
}

fn parse_odd(s: &str) -> Result<usize, String> {
    let k: usize = s.parse().map_err(|e| format!("{e}"))?;
    if k % 2 == 0 {
        return Err(format!("filter size must be odd, got {k}"));
    }
    Ok(k)
}

/// Bad or missing arguments discovered after parsing; exits with code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Usage>() {
            Some(u) => Cli::command().error(clap::error::ErrorKind::ValueValidation, u).exit(),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Resolver::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    match cli.command {
        Command::Train(a) => train(a, &mut cfg),
        Command::Adapt(a) => adapt(a, &mut cfg),
        Command::Study(a) => study(a, &mut cfg),
        Command::Bridge(a) => bridge(a, &mut cfg),
        Command::FitCurve(a) => fit(a, &mut cfg),
        Command::Restore(a) => restore(a),
        Command::Eval(a) => eval(a, &mut cfg),
        Command::Serve(a) => serve(a),
    }
}

fn level_flag(plain: Option<f64>, eight_bit: Option<f64>) -> Option<f64> {
    plain.or(eight_bit.map(|v| v / 255.0))
}

fn resolve<T>(cfg: &mut Resolver, key: &str, flag: Option<T>, default: T) -> Result<T>
where
    T: std::str::FromStr + std::fmt::Display,
    T::Err: std::fmt::Display,
{
    cfg.get(key, flag, default).map_err(|e| usage(format!("{e:#}")))
}

fn resolve_opt<T>(cfg: &mut Resolver, key: &str, flag: Option<T>) -> Result<Option<T>>
where
    T: std::str::FromStr + std::fmt::Display,
    T::Err: std::fmt::Display,
{
    cfg.opt(key, flag, None).map_err(|e| usage(format!("{e:#}")))
}

fn schedule(cfg: &mut Resolver, s: &Schedule, base: TrainConfig) -> Result<TrainConfig> {
    let t = TrainConfig {
        iterations: resolve(cfg, "iterations", s.iterations, base.iterations)?,
        lr: resolve(cfg, "lr", s.lr, base.lr)?,
        lr_decay_step: resolve(cfg, "lr_decay_step", s.lr_decay_step, base.lr_decay_step)?,
        batch: resolve(cfg, "batch", s.batch, base.batch)?,
        patch: resolve(cfg, "patch", s.patch, base.patch)?,
        seed: resolve(cfg, "seed", s.seed, base.seed)?,
        eval_every: resolve(cfg, "eval_every", s.eval_every, base.eval_every)?,
    };
    t.validate().map_err(|e| usage(e.to_string()))?;
    Ok(t)
}

fn eval_images(dir: Option<&str>, channels: usize) -> Result<Vec<Image>> {
    Ok(match dir {
        Some(d) => load_image_dir(d).with_context(|| format!("loading evaluation images from {d}"))?,
        None => Dataset::procedural_eval(channels)?,
    })
}

fn dataset(cfg: &mut Resolver, d: &DataArgs, channels: usize, seed: u64) -> Result<Dataset> {
    let train_dir = resolve_opt(cfg, "train_dir", d.train_dir.clone())?;
    let eval_dir = resolve_opt(cfg, "eval_dir", d.eval_dir.clone())?;
    let mut data = match &train_dir {
        Some(dir) => Dataset {
            train: load_image_dir(dir).with_context(|| format!("loading training images from {dir}"))?,
            eval: Vec::new(),
        },
        None => Dataset::procedural(channels, seed)?,
    };
    if train_dir.is_some() || eval_dir.is_some() {
        data.eval = eval_images(eval_dir.as_deref(), channels)?;
    }
    if data.train.is_empty() || data.eval.is_empty() {
        bail!("training and evaluation sets must not be empty");
    }
    Ok(data)
}

fn finish_config(cfg: &Resolver, out: &Path) -> Result<()> {
    for k in cfg.unused() {
        log::warn!("config key {k} is not used by this command");
    }
    cfg.write(out)
}

fn progress(e: &LogEntry) {
    log::info!("{e}");
}

fn meta_level(ckpt: &Checkpoint, key: &str) -> Option<f64> {
    ckpt.meta.get(key).and_then(|v| v.parse().ok())
}

fn meta_task(ckpt: &Checkpoint) -> Option<Task> {
    ckpt.meta.get("task").and_then(|t| t.parse().ok())
}

fn default_kernel(task: Task) -> usize {
    match task {
        Task::Denoise => 1,
        Task::SuperResolve => 5,
    }
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn train(a: TrainArgs, cfg: &mut Resolver) -> Result<()> {
    let task = resolve(cfg, "task", a.task, Task::Denoise)?;
    let level = resolve_opt(cfg, "level", level_flag(a.level, a.level_8bit))?
        .ok_or_else(|| usage("train needs --level (or --level-8bit)"))?;
    let level = DegradationLevel::new(task, level).map_err(|e| usage(e.to_string()))?;
    let tcfg = schedule(cfg, &a.schedule, TrainConfig::desk_basic())?;
    let channels = resolve(cfg, "channels", a.net.channels, 3)?;
    let net_cfg = NetConfig {
        feat_channels: resolve(cfg, "feat", a.net.feat, NetConfig::desk(channels).feat_channels)?,
        num_blocks: resolve(cfg, "blocks", a.net.blocks, NetConfig::desk(channels).num_blocks)?,
        ..NetConfig::desk(channels)
    };
    net_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = dataset(cfg, &a.data, channels, tcfg.seed)?;
    println!("seed={}", tcfg.seed);
    let (net, log) = pipeline::train_basic(net_cfg, &tcfg, level, &data, &mut progress)?;
    create_dir(&a.out)?;
    let ckpt = Checkpoint::new(Model::Basic(Arc::new(net)))
        .with_meta("task", task)
        .with_meta("level", level.level)
        .with_meta("seed", tcfg.seed);
    save_checkpoint(a.out.join("basic.ckpt"), &ckpt)?;
    std::fs::write(a.out.join("train.log"), log.to_text())?;
    finish_config(cfg, &a.out.join("resolved.cfg"))?;
    if let Some(p) = log.final_psnr() {
        println!("psnr={p}");
    }
    println!("wrote {}", a.out.join("basic.ckpt").display());
    Ok(())
}

fn adapt(a: AdaptArgs, cfg: &mut Resolver) -> Result<()> {
    let base = load_checkpoint(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    let Model::Basic(net) = &base.model else {
        bail!("{} is not a basic-network checkpoint", a.base.display());
    };
    let task = resolve(cfg, "task", a.task.or(meta_task(&base)), Task::Denoise)?;
    let level_b = resolve_opt(cfg, "level_b", level_flag(a.level_b, a.level_b_8bit))?
        .ok_or_else(|| usage("adapt needs --level-b (or --level-b-8bit)"))?;
    let level_b = DegradationLevel::new(task, level_b).map_err(|e| usage(e.to_string()))?;
    let k = resolve(cfg, "adafm_k", a.adafm_k, default_kernel(task))?;
    if k % 2 == 0 {
        return Err(usage(format!("--adafm-k must be odd, got {k}")));
    }
    let tcfg = schedule(cfg, &a.schedule, TrainConfig::desk_adapt())?;
    let data = dataset(cfg, &a.data, net.config().in_channels, tcfg.seed)?;
    println!("seed={}", tcfg.seed);
    let (ada, log) = pipeline::insert_and_adapt(net, k, level_b, &tcfg, &data, &mut progress)?;
    create_dir(&a.out)?;
    let mut ckpt = Checkpoint::new(Model::AdaFm(ada))
        .with_meta("task", task)
        .with_meta("level_b", level_b.level)
        .with_meta("seed", tcfg.seed);
    if let Some(la) = meta_level(&base, "level") {
        ckpt = ckpt.with_meta("level_a", la);
    }
    save_checkpoint(a.out.join("adafm.ckpt"), &ckpt)?;
    std::fs::write(a.out.join("adapt.log"), log.to_text())?;
    finish_config(cfg, &a.out.join("resolved.cfg"))?;
    if let Some(p) = log.final_psnr() {
        println!("psnr={p}");
    }
    println!("wrote {}", a.out.join("adafm.ckpt").display());
    Ok(())
}

fn parse_pairs(text: &str, task: Task) -> Result<Vec<(DegradationLevel, DegradationLevel)>> {
    text.split(',')
        .map(|pair| {
            let (s, e) = pair.split_once(':').ok_or_else(|| usage(format!("pair {pair:?} is not start:end")))?;
            let level = |v: &str| -> Result<DegradationLevel> {
                let v: f64 = v.trim().parse().map_err(|_| usage(format!("bad level {v:?}")))?;
                DegradationLevel::new(task, v).map_err(|e| usage(e.to_string()))
            };
            Ok((level(s)?, level(e)?))
        })
        .collect()
}

fn study(a: StudyArgs, cfg: &mut Resolver) -> Result<()> {
    let task = resolve(cfg, "task", a.task, Task::Denoise)?;
    let pairs = resolve_opt(cfg, "pairs", a.pairs.clone())?.ok_or_else(|| usage("study needs --pairs"))?;
    let pairs = parse_pairs(&pairs, task)?;
    let channels = resolve(cfg, "channels", a.net.channels, 3)?;
    let basic = schedule(cfg, &a.schedule, TrainConfig::desk_basic())?;
    let desk = TrainConfig::desk_adapt();
    let adapt_iterations = resolve(cfg, "adapt_iterations", a.adapt_iterations, desk.iterations)?;
    let adapt = TrainConfig {
        iterations: adapt_iterations,
        lr: resolve(cfg, "adapt_lr", a.adapt_lr, desk.lr)?,
        lr_decay_step: adapt_iterations * 2 / 3,
        ..basic
    };
    let net = NetConfig {
        feat_channels: resolve(cfg, "feat", a.net.feat, NetConfig::desk(channels).feat_channels)?,
        num_blocks: resolve(cfg, "blocks", a.net.blocks, NetConfig::desk(channels).num_blocks)?,
        ..NetConfig::desk(channels)
    };
    net.validate().map_err(|e| usage(e.to_string()))?;
    let scfg = StudyConfig {
        net,
        adafm_kernel: resolve(cfg, "adafm_k", a.adafm_k, default_kernel(task))?,
        basic,
        adapt,
    };
    let data = dataset(cfg, &a.data, channels, basic.seed)?;
    println!("seed={}", basic.seed);
    let results = AdaptationStudy::new(scfg, &data).run(&pairs);
    let failed: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().map(|e| e.to_string())).collect();
    let reports: Vec<_> = results.into_iter().filter_map(Result::ok).collect();
    create_dir(&a.out)?;
    let csv = reports_to_csv(&reports);
    std::fs::write(a.out.join("study.csv"), &csv)?;
    finish_config(cfg, &a.out.join("resolved.cfg"))?;
    print!("{csv}");
    if !failed.is_empty() {
        bail!("{} study cell(s) failed: {}", failed.len(), failed.join("; "));
    }
    Ok(())
}

fn load_basic(path: &Path) -> Result<(Arc<adafm_core::net::BasicNet>, Checkpoint)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    match &ckpt.model {
        Model::Basic(n) => Ok((Arc::clone(n), ckpt)),
        Model::AdaFm(_) => bail!("{} is not a basic-network checkpoint", path.display()),
    }
}

fn bridge(a: BridgeArgs, cfg: &mut Resolver) -> Result<()> {
    let (source, _) = load_basic(&a.source)?;
    let (target, tckpt) = load_basic(&a.target)?;
    let task = meta_task(&tckpt).unwrap_or(Task::Denoise);
    let level = resolve_opt(cfg, "level", a.level.or(meta_level(&tckpt, "level")))?
        .ok_or_else(|| usage("bridge needs --level when the target checkpoint does not record one"))?;
    let level = DegradationLevel::new(task, level).map_err(|e| usage(e.to_string()))?;
    let d = BridgeConfig::default();
    let bcfg = BridgeConfig {
        kernel: resolve(cfg, "kernel", a.kernel, d.kernel)?,
        steps: resolve(cfg, "steps", a.steps, d.steps)?,
        lr: resolve(cfg, "lr", a.lr, d.lr)?,
    };
    let seed = resolve(cfg, "seed", a.seed, 0)?;
    let data = dataset(cfg, &a.data, source.config().in_channels, seed)?;
    println!("seed={seed}");
    let probe = PatchSampler::new(data.train.clone(), level, 32, 8, seed)?.batch(0)?.lq;
    let eval = EvalSet::new(&data.eval, level)?;
    let result = filter_bridge(&source, &target, &bcfg, &probe, &eval)?;
    create_dir(&a.out)?;
    std::fs::write(a.out.join("bridge.csv"), result.to_csv())?;
    finish_config(cfg, &a.out.join("resolved.cfg"))?;
    print!("{}", result.to_csv());
    println!("raw_gap={} bridged_gap={}", result.raw_gap(), result.bridged_gap());
    Ok(())
}

fn fit(a: FitCurveArgs, cfg: &mut Resolver) -> Result<()> {
    let ckpt = load_checkpoint(&a.net).with_context(|| format!("loading {}", a.net.display()))?;
    let Model::AdaFm(net) = &ckpt.model else {
        bail!("{} is not an AdaFM checkpoint", a.net.display());
    };
    let task = meta_task(&ckpt).unwrap_or(Task::Denoise);
    let levels: Vec<f64> = if a.levels_8bit.is_empty() {
        a.levels.clone()
    } else {
        a.levels_8bit.iter().map(|v| v / 255.0).collect()
    };
    if levels.len() < 2 {
        return Err(usage("--levels needs at least the two endpoints L_a,L_b"));
    }
    cfg.record("levels", levels.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    let (la, lb) = (levels[0], levels[levels.len() - 1]);
    let inner = &levels[1..levels.len() - 1];
    let order = resolve(cfg, "order", a.order, default_order(inner.len()))?;
    let step = resolve(cfg, "step", a.step, 0.01)?;
    let eval_dir = resolve_opt(cfg, "eval_dir", a.eval_dir.clone())?;
    let images = eval_images(eval_dir.as_deref(), net.config().in_channels)?;
    let mut csv = String::from("level,lambda,psnr\n");
    let mut interior: Vec<ModulationPoint> = Vec::with_capacity(inner.len());
    for &l in inner {
        let eval = EvalSet::new(&images, DegradationLevel::new(task, l).map_err(|e| usage(e.to_string()))?)?;
        let p = best_lambda(net, &eval, step)?;
        csv.push_str(&format!("{},{},{}\n", p.level, p.lambda, p.psnr_at_best));
        interior.push(p);
    }
    let fit = fit_curve(task, la, lb, &interior, order).map_err(|e| usage(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_curve(&a.out, &fit.curve)?;
    finish_config(cfg, &a.out.with_extension("resolved.cfg"))?;
    print!("{csv}");
    println!("{}", fit.curve);
    if !fit.monotone {
        log::warn!("fitted curve is not monotone over [{la}, {lb}]");
    }
    Ok(())
}

fn restore(a: RestoreArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.net).with_context(|| format!("loading {}", a.net.display()))?;
    let Model::AdaFm(net) = &ckpt.model else {
        bail!("{} is not an AdaFM checkpoint", a.net.display());
    };
    let applied = match (a.lambda, level_flag(a.level, a.level_8bit), &a.curve) {
        (Some(l), None, _) => AppliedLambda::clamp(l),
        (None, Some(level), Some(path)) => {
            let curve = load_curve(path).with_context(|| format!("loading {}", path.display()))?;
            AppliedLambda::clamp(predict_lambda(&curve, level))
        }
        _ => return Err(usage("give exactly one of --lambda and --level (with --curve)")),
    };
    let img = load_pnm(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if img.channels != net.config().in_channels {
        bail!("network expects {} channels, {} has {}", net.config().in_channels, a.input.display(), img.channels);
    }
    let out = restore_image(&Modulated { net, lambda: applied.value as f64 }, &img)?;
    save_pnm(&a.out, &out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("lambda={}", applied.value);
    Ok(())
}

fn eval(a: EvalArgs, cfg: &mut Resolver) -> Result<()> {
    let ckpt = load_checkpoint(&a.net).with_context(|| format!("loading {}", a.net.display()))?;
    let task = resolve(cfg, "task", a.task.or(meta_task(&ckpt)), Task::Denoise)?;
    let stored = match &ckpt.model {
        Model::Basic(_) => meta_level(&ckpt, "level"),
        Model::AdaFm(_) => meta_level(&ckpt, "level_b"),
    };
    let level = resolve_opt(cfg, "level", level_flag(a.level, a.level_8bit).or(stored))?
        .ok_or_else(|| usage("eval needs --level when the checkpoint does not record one"))?;
    let level = DegradationLevel::new(task, level).map_err(|e| usage(e.to_string()))?;
    let eval_dir = resolve_opt(cfg, "eval_dir", a.eval_dir.clone())?;
    let channels = match &ckpt.model {
        Model::Basic(n) => n.config().in_channels,
        Model::AdaFm(n) => n.config().in_channels,
    };
    let eval = EvalSet::new(&eval_images(eval_dir.as_deref(), channels)?, level)?;
    let psnr = match &ckpt.model {
        Model::Basic(n) => {
            if a.lambda.is_some() {
                return Err(usage("--lambda needs an AdaFM checkpoint"));
            }
            evaluate(n.as_ref(), &eval)?
        }
        Model::AdaFm(n) => evaluate(&Modulated { net: n, lambda: a.lambda.unwrap_or(1.0) }, &eval)?,
    };
    println!("psnr={psnr}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = adafm_service::ServedModel::load(&a.model, a.curve.as_deref())
        .map_err(|e| anyhow!("loading {}: {e}", a.model.display()))?;
    let state = adafm_service::AppState {
        model,
        config: adafm_service::ServiceConfig {
            max_width: a.max_width,
            max_height: a.max_height,
            ui_dir: a.ui_dir,
        },
    };
    let listener = std::net::TcpListener::bind(SocketAddr::new(a.host, a.port))
        .with_context(|| format!("binding {}:{}", a.host, a.port))?;
    let addr = listener.local_addr()?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "port={}\nlistening on http://{addr}", addr.port()).and_then(|_| stdout.flush());
    adafm_service::run_blocking(state, listener)?;
    Ok(())
}
