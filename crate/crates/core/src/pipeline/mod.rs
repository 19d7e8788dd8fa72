//! Training, adaptation, evaluation and the experiments built on them.

mod bridge;
mod study;

pub use bridge::{filter_bridge, BridgeConfig, BridgeLayer, BridgeResult, Bridged};
pub use study::{adaptation_study, reports_to_csv, AdaptationReport, AdaptationStudy, Direction, StudyConfig, CSV_HEADER};

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::data::{self, DataError, DegradationLevel, Image, PatchBatch, PatchSampler};
use crate::net::{AdaFmNet, BasicNet, NetConfig, NetError, NoHook};
use crate::tensor::{AdamConfig, AdamState, RandomSource, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Seed of the held-out evaluation degradations. Never derived from a run seed.
pub const EVAL_SEED: u64 = 0x5eed_e7a1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f32,
    /// Iteration after which the learning rate is divided by 10; 0 disables decay.
    pub lr_decay_step: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale schedule at lr 1e-4.
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            ..TrainConfig::desk_basic()
        }
    }
}

impl TrainConfig {
    /// Basic-network schedule at desk scale.
    pub fn desk_basic() -> Self {
        TrainConfig {
            iterations: 3000,
            lr: 1e-3,
            lr_decay_step: 2000,
            batch: 8,
            patch: 32,
            seed: 0,
            eval_every: 100,
        }
    }

    /// Adaptation schedule at desk scale.
    pub fn desk_adapt() -> Self {
        TrainConfig {
            iterations: 1500,
            lr: 1e-2,
            lr_decay_step: 1000,
            ..Self::desk_basic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.into()));
        if self.iterations == 0 || self.batch == 0 || self.patch == 0 || self.eval_every == 0 {
            return bad("iterations, batch, patch and eval_every must be positive");
        }
        if self.patch % 2 != 0 {
            return bad("patch size must be even");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    fn lr_at(&self, iter: usize) -> f32 {
        if self.lr_decay_step > 0 && iter > self.lr_decay_step {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    /// `key=value` pairs describing this schedule.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("iterations", self.iterations.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_step", self.lr_decay_step.to_string()),
            ("batch", self.batch.to_string()),
            ("patch", self.patch.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }
}

/// Clean training images plus held-out evaluation images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub eval: Vec<Image>,
}

impl Dataset {
    pub const TRAIN_COUNT: usize = 64;
    pub const EVAL_COUNT: usize = 4;
    pub const SIZE: usize = 64;

    /// Procedural training set drawn from `seed` and a fixed evaluation set.
    pub fn procedural(channels: usize, seed: u64) -> Result<Self> {
        let train = (0..Self::TRAIN_COUNT as u64)
            .map(|i| data::gen_procedural_image(seed.wrapping_mul(1000).wrapping_add(i), Self::SIZE, Self::SIZE, channels))
            .collect::<Result<_, _>>()?;
        Ok(Dataset {
            train,
            eval: Self::procedural_eval(channels)?,
        })
    }

    /// The frozen held-out images used for validation and evaluation.
    pub fn procedural_eval(channels: usize) -> Result<Vec<Image>> {
        (0..Self::EVAL_COUNT as u64)
            .map(|i| data::gen_procedural_image(EVAL_SEED + i, Self::SIZE, Self::SIZE, channels))
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    }

    pub fn channels(&self) -> usize {
        self.train.first().or(self.eval.first()).map_or(0, |i| i.channels)
    }
}

/// Loads every `*.pgm` / `*.ppm` file of a directory in name order.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())
        .map_err(DataError::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::InvalidArgument(format!("no .pgm/.ppm files in {}", dir.as_ref().display())).into());
    }
    paths.iter().map(|p| data::load_pnm(p).map_err(Into::into)).collect()
}

/// Evaluation images degraded once with [`EVAL_SEED`].
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub level: DegradationLevel,
    pub clean: Vec<Image>,
    pub degraded: Vec<Image>,
}

impl EvalSet {
    pub fn new(clean: &[Image], level: DegradationLevel) -> Result<Self> {
        if clean.is_empty() {
            return Err(DataError::InvalidArgument("empty evaluation set".into()).into());
        }
        let degraded = clean
            .iter()
            .enumerate()
            .map(|(i, img)| data::degrade(img, level, &mut RandomSource::derive(EVAL_SEED, i as u64)))
            .collect::<Result<_, _>>()?;
        Ok(EvalSet {
            level,
            clean: clean.to_vec(),
            degraded,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Anything that maps a degraded batch to a restored batch.
pub trait Restorer {
    fn restore(&self, x: &Tensor) -> Result<Tensor>;
}

/// Output equals input.
pub struct Identity;

impl Restorer for Identity {
    fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

impl Restorer for BasicNet {
    fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?)
    }
}

impl Restorer for AdaFmNet {
    fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?)
    }
}

/// An AdaFM network interpolated at a fixed coefficient.
pub struct Modulated<'n> {
    pub net: &'n AdaFmNet,
    pub lambda: f64,
}

impl Restorer for Modulated<'_> {
    fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward_modulated(x, self.lambda)?.0)
    }
}

/// Restores one image of any size; odd sides are edge-padded and cropped back.
pub fn restore_image(r: &dyn Restorer, img: &Image) -> Result<Image> {
    let padded = img.pad_to_even();
    let out = Image::from_tensor(&r.restore(&padded.to_tensor())?, 0)?;
    Ok(out.crop(0, 0, img.height, img.width)?)
}

/// Mean PSNR of `r` over the evaluation set, using the task's channel convention.
pub fn evaluate(r: &dyn Restorer, eval: &EvalSet) -> Result<f64> {
    if eval.is_empty() {
        return Err(DataError::InvalidArgument("empty evaluation set".into()).into());
    }
    let mut total = 0.0;
    for (lq, gt) in eval.degraded.iter().zip(&eval.clean) {
        total += data::task_psnr(&restore_image(r, lq)?, gt, eval.level.task)?;
    }
    Ok(total / eval.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    /// Validation PSNR after this iteration.
    pub psnr: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter {} loss {:.6} psnr {:.4}", self.iter, self.loss, self.psnr)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Loss of every iteration.
    pub losses: Vec<f32>,
}

impl TrainLog {
    pub fn final_psnr(&self) -> Option<f64> {
        self.entries.last().map(|e| e.psnr)
    }

    /// Mean loss of each window of `w` consecutive iterations.
    pub fn smoothed(&self, w: usize) -> Vec<f64> {
        self.losses
            .chunks(w.max(1))
            .map(|c| c.iter().map(|&l| l as f64).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Callback receiving each log entry as it is produced.
pub type LogSink<'s> = &'s mut dyn FnMut(&LogEntry);

/// Discards log entries.
pub fn no_log(_: &LogEntry) {}

trait Trainee {
    /// Loss of one batch; leaves fresh gradients in every trainable tensor.
    fn step(&mut self, batch: &PatchBatch) -> Result<f32>;
    fn trainable(&mut self) -> Vec<&mut Tensor>;
    fn validate(&self, eval: &EvalSet) -> Result<f64>;
}

impl Trainee for BasicNet {
    fn step(&mut self, batch: &PatchBatch) -> Result<f32> {
        let (loss, vars, grads) = {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape, true);
            let x = tape.frozen(&batch.lq);
            let y = self.graph(&mut tape, &vars, x, &mut NoHook)?;
            let t = tape.frozen(&batch.gt);
            let l = tape.l1_loss(y, t)?;
            (tape.value(l).item()?, vars, tape.backward(l)?)
        };
        let targets = vars.iter().flat_map(|v| [v.weight, v.bias]);
        for (p, v) in self.params_mut().into_iter().zip(targets) {
            p.zero_grad();
            grads.accumulate_into(v, p)?;
        }
        Ok(loss)
    }

    fn trainable(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
    }

    fn validate(&self, eval: &EvalSet) -> Result<f64> {
        evaluate(self, eval)
    }
}

impl Trainee for AdaFmNet {
    fn step(&mut self, batch: &PatchBatch) -> Result<f32> {
        let (loss, vars, grads) = {
            let mut tape = Tape::new();
            let x = tape.frozen(&batch.lq);
            let (y, vars) = self.graph(&mut tape, &self.layers, true, x)?;
            let t = tape.frozen(&batch.gt);
            let l = tape.l1_loss(y, t)?;
            (tape.value(l).item()?, vars, tape.backward(l)?)
        };
        let targets = vars.iter().flat_map(|&(g, b)| [g, b]);
        for (p, v) in self.adafm_params_mut().into_iter().zip(targets) {
            p.zero_grad();
            grads.accumulate_into(v, p)?;
        }
        Ok(loss)
    }

    fn trainable(&mut self) -> Vec<&mut Tensor> {
        self.adafm_params_mut()
    }

    fn validate(&self, eval: &EvalSet) -> Result<f64> {
        evaluate(self, eval)
    }
}

fn optimize<T: Trainee>(
    model: &mut T,
    tcfg: &TrainConfig,
    level: DegradationLevel,
    data: &Dataset,
    sink: LogSink,
) -> Result<TrainLog> {
    tcfg.validate()?;
    let sampler = PatchSampler::new(
        data.train.clone(),
        level,
        tcfg.patch,
        tcfg.batch,
        RandomSource::derive(tcfg.seed, 2).next_u64(),
    )?;
    let eval = EvalSet::new(&data.eval, level)?;
    for p in model.trainable() {
        p.set_requires_grad(true);
    }
    let mut adam = {
        let params = model.trainable();
        let refs: Vec<&Tensor> = params.iter().map(|p| &**p).collect();
        AdamState::new(
            AdamConfig {
                lr: tcfg.lr,
                ..AdamConfig::default()
            },
            &refs,
        )
    };
    let mut log = TrainLog::default();
    let mut window = 0.0f64;
    let mut window_len = 0usize;
    for iter in 1..=tcfg.iterations {
        let batch = sampler.batch(iter as u64)?;
        let loss = model.step(&batch)?;
        if !loss.is_finite() {
            return Err(PipelineError::Diverged { iter, loss });
        }
        adam.set_lr(tcfg.lr_at(iter));
        adam.step(&mut model.trainable())?;
        log.losses.push(loss);
        window += loss as f64;
        window_len += 1;
        if iter % tcfg.eval_every == 0 || iter == tcfg.iterations {
            let entry = LogEntry {
                iter,
                loss: window / window_len as f64,
                psnr: model.validate(&eval)?,
            };
            log::info!("{entry}");
            sink(&entry);
            log.entries.push(entry);
            window = 0.0;
            window_len = 0;
        }
    }
    for p in model.trainable() {
        p.set_requires_grad(false);
    }
    Ok(log)
}

/// Trains a fresh basic network on `level` with Adam and L1 loss.
pub fn train_basic(
    cfg: NetConfig,
    tcfg: &TrainConfig,
    level: DegradationLevel,
    data: &Dataset,
    sink: LogSink,
) -> Result<(BasicNet, TrainLog)> {
    let mut rng = RandomSource::derive(tcfg.seed, 1);
    let net = BasicNet::new(cfg, &mut rng)?;
    finetune(net, tcfg, level, data, sink)
}

/// Continues training every parameter of an existing network on `level`.
pub fn finetune(
    mut net: BasicNet,
    tcfg: &TrainConfig,
    level: DegradationLevel,
    data: &Dataset,
    sink: LogSink,
) -> Result<(BasicNet, TrainLog)> {
    check_channels(net.config(), data)?;
    let log = optimize(&mut net, tcfg, level, data, sink)?;
    Ok((net, log))
}

/// Trains only the AdaFM layers on `level_b`; the shared base stays untouched.
pub fn adapt(
    mut net: AdaFmNet,
    level_b: DegradationLevel,
    tcfg: &TrainConfig,
    data: &Dataset,
    sink: LogSink,
) -> Result<(AdaFmNet, TrainLog)> {
    check_channels(net.config(), data)?;
    let log = optimize(&mut net, tcfg, level_b, data, sink)?;
    Ok((net, log))
}

/// Convenience: insert identity AdaFM layers into `base` and adapt them.
pub fn insert_and_adapt(
    base: &Arc<BasicNet>,
    k: usize,
    level_b: DegradationLevel,
    tcfg: &TrainConfig,
    data: &Dataset,
    sink: LogSink,
) -> Result<(AdaFmNet, TrainLog)> {
    adapt(base.insert_adafm(k)?, level_b, tcfg, data, sink)
}

fn check_channels(cfg: NetConfig, data: &Dataset) -> Result<()> {
    let bad = data
        .train
        .iter()
        .chain(&data.eval)
        .find(|i| i.channels != cfg.in_channels);
    match bad {
        Some(img) => Err(PipelineError::InvalidConfig(format!(
            "network expects {} channels, dataset has a {} image",
            cfg.in_channels,
            img.dims()
        ))),
        None => Ok(()),
    }
}
