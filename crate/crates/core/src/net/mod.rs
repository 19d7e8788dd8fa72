//! The restoration network, AdaFM layers and their interpolation.
//!
//! Layout of [`BasicNet`] (every convolution 3×3):
//!
//! ```text
//! x ─ head ─ relu ─ down(stride 2) ─ relu ─┬─ [res block] × B ─ body ─(+)─ up ─ shuffle×2 ─ relu ─ tail ─(+ x)─ out
//!                                          └─────────────────────────────┘
//! res block:  t ─ conv1 ─ [AdaFM] ─ relu ─ conv2 ─ [AdaFM] ─(+ t)
//! ```
//!
//! `up` widens to 4·feat channels so the pixel shuffle returns `feat` channels at
//! full resolution. Bias terms are excluded from all parameter counts.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Model,
    CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::kernels::{self, ConvParams};
use crate::tensor::{RandomSource, Shape, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("AdaFM kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

const KERNEL: usize = 3;
const RESIDUAL_GAIN: f32 = 0.1;

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub feat_channels: usize,
    pub num_blocks: usize,
    pub adafm_kernel: Option<usize>,
}

impl NetConfig {
    /// Small CPU-friendly configuration: 16 features, 4 blocks.
    pub fn desk(in_channels: usize) -> Self {
        NetConfig {
            in_channels,
            feat_channels: 16,
            num_blocks: 4,
            adafm_kernel: None,
        }
    }

    /// Full-size configuration: 64 features, 16 blocks.
    pub fn full(in_channels: usize) -> Self {
        NetConfig {
            in_channels,
            feat_channels: 64,
            num_blocks: 16,
            adafm_kernel: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(NetError::InvalidConfig(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.feat_channels == 0 {
            return Err(NetError::InvalidConfig("feat_channels must be positive".into()));
        }
        if self.num_blocks == 0 {
            return Err(NetError::InvalidConfig("num_blocks must be at least 1".into()));
        }
        match self.adafm_kernel {
            Some(k) if k % 2 == 0 => Err(NetError::EvenKernel(k)),
            _ => Ok(()),
        }
    }

    /// Weight shapes of every convolution in forward order.
    fn conv_shapes(&self) -> Vec<(String, Shape, usize)> {
        let (f, c) = (self.feat_channels, self.in_channels);
        let mut v = vec![
            ("head".to_string(), Shape::new(f, c, KERNEL, KERNEL), 1),
            ("down".to_string(), Shape::new(f, f, KERNEL, KERNEL), 2),
        ];
        for i in 0..self.num_blocks {
            for j in 1..=2 {
                v.push((format!("blocks.{i}.conv{j}"), Shape::new(f, f, KERNEL, KERNEL), 1));
            }
        }
        v.push(("body".into(), Shape::new(f, f, KERNEL, KERNEL), 1));
        v.push(("up".into(), Shape::new(4 * f, f, KERNEL, KERNEL), 1));
        v.push(("tail".into(), Shape::new(c, f, KERNEL, KERNEL), 1));
        v
    }

    /// Parameter counts (biases excluded) implied by the config alone.
    pub fn param_count(&self, adafm_kernel: usize) -> ParamCount {
        let base_total = self.conv_shapes().iter().map(|(_, s, _)| s.numel()).sum();
        ParamCount::new(self, base_total, 2 * self.num_blocks * self.feat_channels * adafm_kernel * adafm_kernel)
    }

    pub(crate) fn to_pairs(self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("in_channels", self.in_channels.to_string()),
            ("feat_channels", self.feat_channels.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
        ];
        if let Some(k) = self.adafm_kernel {
            v.push(("adafm_kernel", k.to_string()));
        }
        v
    }
}

/// One 3×3 convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv {
    fn init(shape: Shape, stride: usize, gain: f32, rng: &mut RandomSource) -> Result<Self> {
        let fan_in = shape.c() * shape.h() * shape.w();
        let std = gain * (2.0 / fan_in as f32).sqrt();
        Ok(Conv {
            weight: rng.randn(shape, 0.0, std)?,
            bias: Tensor::zeros([shape.n(), 1, 1, 1]),
            stride,
        })
    }

    fn zeros(shape: Shape, stride: usize) -> Self {
        Conv {
            weight: Tensor::zeros(shape),
            bias: Tensor::zeros([shape.n(), 1, 1, 1]),
            stride,
        }
    }

    pub fn params(&self) -> ConvParams {
        ConvParams {
            stride: self.stride,
            pad: self.weight.shape().h() / 2,
            groups: 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// Identifies one convolution in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSite {
    /// Position among all convolutions.
    pub index: usize,
    /// `(block, 0 | 1)` for the two convolutions inside a residual block.
    pub block: Option<(usize, usize)>,
}

impl ConvSite {
    /// Index of the AdaFM layer that follows this convolution, if any.
    pub fn adafm_slot(&self) -> Option<usize> {
        self.block.map(|(b, j)| 2 * b + j)
    }
}

/// Called around every convolution of a forward pass.
pub trait ConvHook<'a> {
    /// Observes the input of a convolution.
    fn before_conv(&mut self, _tape: &Tape<'a>, _site: ConvSite, _input: Var) {}

    /// Transforms the (pre-activation) output of a convolution.
    fn after_conv(&mut self, _tape: &mut Tape<'a>, _site: ConvSite, out: Var) -> Result<Var> {
        Ok(out)
    }
}

/// Hook that leaves every convolution unchanged.
pub struct NoHook;
impl ConvHook<'_> for NoHook {}

/// Tape handles for one convolution's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub params: ConvParams,
}

/// Single-level restoration network.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicNet {
    config: NetConfig,
    pub head: Conv,
    pub down: Conv,
    pub blocks: Vec<ResBlock>,
    pub body: Conv,
    pub up: Conv,
    pub tail: Conv,
}

impl BasicNet {
    /// Builds a network with fan-in scaled Gaussian weights (std = √(2 / fan_in))
    /// and zero biases, drawn in forward order from `rng`. The last convolution
    /// of every residual branch and the tail start 10× smaller, so residual
    /// blocks start near the identity and initial outputs stay small.
    pub fn new(config: NetConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let mut convs = config
            .conv_shapes()
            .into_iter()
            .map(|(name, s, stride)| {
                let gain = if name.ends_with("conv2") || name == "tail" { RESIDUAL_GAIN } else { 1.0 };
                Conv::init(s, stride, gain, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(config, &mut convs))
    }

    /// Network with all-zero parameters, used as a target for loading.
    pub(crate) fn zeroed(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut convs: Vec<Conv> = config
            .conv_shapes()
            .into_iter()
            .map(|(_, s, stride)| Conv::zeros(s, stride))
            .collect();
        Ok(Self::assemble(config, &mut convs))
    }

    fn assemble(config: NetConfig, convs: &mut Vec<Conv>) -> Self {
        let mut it = convs.drain(..);
        let mut next = || it.next().expect("conv count matches config");
        let head = next();
        let down = next();
        let blocks = (0..config.num_blocks)
            .map(|_| ResBlock {
                conv1: next(),
                conv2: next(),
            })
            .collect();
        let body = next();
        let up = next();
        let tail = next();
        BasicNet {
            config: NetConfig {
                adafm_kernel: None,
                ..config
            },
            head,
            down,
            blocks,
            body,
            up,
            tail,
        }
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    /// All convolutions in forward order.
    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.head, &self.down];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
        }
        v.extend([&self.body, &self.up, &self.tail]);
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv> {
        let mut v = vec![&mut self.head, &mut self.down];
        for b in &mut self.blocks {
            v.push(&mut b.conv1);
            v.push(&mut b.conv2);
        }
        v.extend([&mut self.body, &mut self.up, &mut self.tail]);
        v
    }

    pub fn conv_names(&self) -> Vec<String> {
        self.config.conv_shapes().into_iter().map(|(n, _, _)| n).collect()
    }

    /// `(name, tensor)` for every parameter, weights before biases per conv.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.conv_names()
            .into_iter()
            .zip(self.convs())
            .flat_map(|(n, c)| [(format!("{n}.weight"), &c.weight), (format!("{n}.bias"), &c.bias)])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.convs().into_iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(on));
    }

    pub fn count_params(&self) -> ParamCount {
        ParamCount::new(&self.config, self.convs().iter().map(|c| c.weight.numel()).sum(), 0)
    }

    /// Records the parameters on `tape`; gradients are tracked only if `trainable`.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<ConvVars> {
        self.convs()
            .into_iter()
            .map(|c| {
                let (weight, bias) = if trainable {
                    (tape.leaf(&c.weight), tape.leaf(&c.bias))
                } else {
                    (tape.frozen(&c.weight), tape.frozen(&c.bias))
                };
                ConvVars {
                    weight,
                    bias,
                    params: c.params(),
                }
            })
            .collect()
    }

    /// Records the forward pass of `x` on `tape`, calling `hook` around every convolution.
    pub fn graph<'a>(
        &self,
        tape: &mut Tape<'a>,
        vars: &[ConvVars],
        x: Var,
        hook: &mut dyn ConvHook<'a>,
    ) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.c() != self.config.in_channels || s.h() % 2 != 0 || s.w() % 2 != 0 {
            return Err(NetError::ArchitectureMismatch(format!(
                "input {s} needs {} channels and even spatial size",
                self.config.in_channels
            )));
        }
        let mut index = 0usize;
        let mut conv = |tape: &mut Tape<'a>, input: Var, block: Option<(usize, usize)>| -> Result<Var> {
            let site = ConvSite { index, block };
            let cv = vars[index];
            index += 1;
            hook.before_conv(tape, site, input);
            let y = tape.conv2d(input, cv.weight, cv.bias, cv.params)?;
            hook.after_conv(tape, site, y)
        };

        let h = conv(tape, x, None)?;
        let h = tape.relu(h);
        let d = conv(tape, h, None)?;
        let d = tape.relu(d);
        let mut t = d;
        for b in 0..self.config.num_blocks {
            let c1 = conv(tape, t, Some((b, 0)))?;
            let r = tape.relu(c1);
            let c2 = conv(tape, r, Some((b, 1)))?;
            t = tape.add(t, c2)?;
        }
        let body = conv(tape, t, None)?;
        let t = tape.add(body, d)?;
        let u = conv(tape, t, None)?;
        let u = tape.pixel_shuffle(u, 2)?;
        let u = tape.relu(u);
        let o = conv(tape, u, None)?;
        Ok(o)
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &mut NoHook)
    }

    pub fn forward_with<'a>(&'a self, x: &'a Tensor, hook: &mut dyn ConvHook<'a>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.frozen(x);
        let y = self.graph(&mut tape, &vars, xv, hook)?;
        Ok(tape.into_value(y))
    }

    /// Inserts identity AdaFM layers of size `k`, sharing this network as the frozen base.
    pub fn insert_adafm(self: &Arc<Self>, k: usize) -> Result<AdaFmNet> {
        AdaFmNet::new(Arc::clone(self), k)
    }
}

/// Biases-excluded parameter counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub base_total: usize,
    /// Both convolutions of one residual block.
    pub residual_block: usize,
    pub adafm_total: usize,
    /// `adafm_total / base_total`.
    pub adafm_fraction: f64,
}

impl ParamCount {
    fn new(config: &NetConfig, base_total: usize, adafm_total: usize) -> Self {
        ParamCount {
            base_total,
            residual_block: 2 * config.feat_channels * config.feat_channels * KERNEL * KERNEL,
            adafm_total,
            adafm_fraction: adafm_total as f64 / base_total.max(1) as f64,
        }
    }
}

/// Depthwise filter and bias applied after one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaFmLayer {
    /// Shape (channels, 1, k, k).
    pub g: Tensor,
    /// Shape (channels, 1, 1, 1).
    pub b: Tensor,
}

impl AdaFmLayer {
    pub fn identity(channels: usize, k: usize) -> Self {
        AdaFmLayer {
            g: Tensor::identity_kernels(channels, k),
            b: Tensor::zeros([channels, 1, 1, 1]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.g.shape().h()
    }

    pub fn channels(&self) -> usize {
        self.g.shape().n()
    }

    pub fn conv_params(&self) -> ConvParams {
        ConvParams::depthwise(self.kernel(), self.channels())
    }

    /// `g* = (1 − λ)·I + λ·g`, `b* = λ·b`, exact at both endpoints.
    pub fn interpolate(&self, lambda: f32) -> AdaFmLayer {
        let (k, c) = (self.kernel(), self.kernel() / 2);
        let keep = 1.0 - lambda;
        let g = Tensor::from_fn(self.g.shape(), |ch, _, y, x| {
            let id = if y == c && x == c { 1.0 } else { 0.0 };
            // + 0.0 folds a signed zero into +0.0 and leaves other values alone.
            keep * id + lambda * self.g.data()[ch * k * k + y * k + x] + 0.0
        });
        let b = Tensor::from_fn(self.b.shape(), |ch, _, _, _| lambda * self.b.data()[ch] + 0.0);
        AdaFmLayer { g, b }
    }

    /// Applies the layer to a feature map (inference only).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::conv2d(x, &self.g, &self.b, self.conv_params())?)
    }
}

/// Coefficient applied to an interpolation request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppliedLambda {
    pub value: f32,
    /// The request was outside [0, 1] and was clamped.
    pub clamped: bool,
}

impl AppliedLambda {
    pub fn clamp(lambda: f64) -> Self {
        let value = if lambda.is_nan() { 0.0 } else { lambda.clamp(0.0, 1.0) };
        AppliedLambda {
            value: value as f32,
            clamped: value != lambda,
        }
    }
}

/// Basic network plus one AdaFM layer per residual-block convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaFmNet {
    base: Arc<BasicNet>,
    pub layers: Vec<AdaFmLayer>,
}

struct AdaFmHook<'l> {
    vars: &'l [(Var, Var)],
    params: &'l [ConvParams],
}

impl<'a> ConvHook<'a> for AdaFmHook<'_> {
    fn after_conv(&mut self, tape: &mut Tape<'a>, site: ConvSite, out: Var) -> Result<Var> {
        match site.adafm_slot() {
            Some(i) => {
                let (g, b) = self.vars[i];
                Ok(tape.conv2d(out, g, b, self.params[i])?)
            }
            None => Ok(out),
        }
    }
}

impl AdaFmNet {
    pub fn new(base: Arc<BasicNet>, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(NetError::EvenKernel(k));
        }
        let cfg = base.config();
        let layers = (0..2 * cfg.num_blocks)
            .map(|_| AdaFmLayer::identity(cfg.feat_channels, k))
            .collect();
        Ok(AdaFmNet { base, layers })
    }

    pub(crate) fn from_parts(base: Arc<BasicNet>, layers: Vec<AdaFmLayer>) -> Result<Self> {
        let cfg = base.config();
        if layers.len() != 2 * cfg.num_blocks
            || layers
                .iter()
                .any(|l| l.channels() != cfg.feat_channels || l.kernel() % 2 == 0)
        {
            return Err(NetError::ArchitectureMismatch(
                "AdaFM layers do not match the base network".into(),
            ));
        }
        Ok(AdaFmNet { base, layers })
    }

    pub fn base(&self) -> &BasicNet {
        &self.base
    }

    pub fn base_arc(&self) -> &Arc<BasicNet> {
        &self.base
    }

    pub fn kernel(&self) -> usize {
        self.layers[0].kernel()
    }

    pub fn config(&self) -> NetConfig {
        NetConfig {
            adafm_kernel: Some(self.kernel()),
            ..self.base.config()
        }
    }

    /// `(name, tensor)` for the AdaFM parameters only.
    pub fn named_adafm_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("adafm.{i}.g"), &l.g), (format!("adafm.{i}.b"), &l.b)])
            .collect()
    }

    pub fn adafm_params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.g, &l.b]).collect()
    }

    pub fn adafm_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.g, &mut l.b]).collect()
    }

    pub fn count_params(&self) -> ParamCount {
        ParamCount::new(
            &self.config(),
            self.base.count_params().base_total,
            self.layers.iter().map(|l| l.g.numel()).sum(),
        )
    }

    /// Effective layers for coefficient `lambda`, clamped to [0, 1].
    pub fn interpolate(&self, lambda: f64) -> (Vec<AdaFmLayer>, AppliedLambda) {
        let applied = AppliedLambda::clamp(lambda);
        let layers = self.layers.iter().map(|l| l.interpolate(applied.value)).collect();
        (layers, applied)
    }

    /// Records the forward pass with the given AdaFM layers (trainable or not).
    pub fn graph<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        layers: &'a [AdaFmLayer],
        trainable: bool,
        x: Var,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let base_vars = self.base.register(tape, false);
        let vars: Vec<(Var, Var)> = layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.leaf(&l.g), tape.leaf(&l.b))
                } else {
                    (tape.frozen(&l.g), tape.frozen(&l.b))
                }
            })
            .collect();
        let params: Vec<ConvParams> = layers.iter().map(AdaFmLayer::conv_params).collect();
        let mut hook = AdaFmHook {
            vars: &vars,
            params: &params,
        };
        let y = self.base.graph(tape, &base_vars, x, &mut hook)?;
        Ok((y, vars))
    }

    fn forward_layers(&self, layers: &[AdaFmLayer], x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.frozen(x);
        let (y, _) = self.graph(&mut tape, layers, false, xv)?;
        Ok(tape.into_value(y))
    }

    /// Forward with the trained AdaFM layers (the λ = 1 endpoint).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_layers(&self.layers, x)
    }

    /// Forward with AdaFM layers interpolated at `lambda`.
    pub fn forward_modulated(&self, x: &Tensor, lambda: f64) -> Result<(Tensor, AppliedLambda)> {
        let (layers, applied) = self.interpolate(lambda);
        Ok((self.forward_layers(&layers, x)?, applied))
    }
}

/// Mean over all corresponding conv filters of `1 − cos(f_a, f_b)`, each filter
/// flattened per output channel. Filters with zero norm count as orthogonal.
pub fn mean_cosine_distance(a: &BasicNet, b: &BasicNet) -> Result<f64> {
    if a.config() != b.config() {
        return Err(NetError::ArchitectureMismatch(format!(
            "{:?} vs {:?}",
            a.config(),
            b.config()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (ca, cb) in a.convs().into_iter().zip(b.convs()) {
        let per = ca.weight.numel() / ca.out_channels();
        for (fa, fb) in ca.weight.data().chunks_exact(per).zip(cb.weight.data().chunks_exact(per)) {
            let dot: f64 = fa.iter().zip(fb).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = fa.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = fb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
            total += 1.0 - cos.clamp(-1.0, 1.0);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Folds a depthwise filter `g` into a preceding convolution filter `f`:
/// `f_mid = f + λ·((g − I) ∗ f)`, where `∗` is full 2-D convolution per output
/// channel. The result has spatial size `k_f + k_g − 1` with `f` centered, so
/// convolving with `f_mid` equals applying `f` then the interpolated AdaFM filter.
pub fn interpolate_filter(f: &Tensor, g: &Tensor, lambda: f32) -> Result<Tensor> {
    let fs = f.shape();
    let gs = g.shape();
    if gs.n() != fs.n() || gs.c() != 1 || gs.h() != gs.w() || gs.h() % 2 == 0 || fs.h() != fs.w() {
        return Err(TensorError::ShapeMismatch {
            op: "interpolate_filter",
            left: fs,
            right: gs,
        }
        .into());
    }
    let (co, ci, kf, kg) = (fs.n(), fs.c(), fs.h(), gs.h());
    let kout = kf + kg - 1;
    // Full convolution as a depthwise cross-correlation with the flipped (g − I)
    // and padding kg − 1; one channel per (out, in) filter pair.
    let c = kg / 2;
    let delta = Tensor::from_fn([co * ci, 1, kg, kg], |ch, _, y, x| {
        let (fy, fx) = (kg - 1 - y, kg - 1 - x);
        let id = if fy == c && fx == c { 1.0 } else { 0.0 };
        g.data()[(ch / ci) * kg * kg + fy * kg + fx] - id
    });
    let planes = f.clone().reshape([1, co * ci, kf, kf])?;
    let p = ConvParams {
        stride: 1,
        pad: kg - 1,
        groups: co * ci,
    };
    let d = kernels::conv2d(&planes, &delta, &Tensor::zeros([co * ci, 1, 1, 1]), p)?;
    let off = (kg - 1) / 2;
    let out = Tensor::from_fn([co, ci, kout, kout], |o, i, y, x| {
        let base = if (off..off + kf).contains(&y) && (off..off + kf).contains(&x) {
            f.data()[((o * ci + i) * kf + y - off) * kf + x - off]
        } else {
            0.0
        };
        base + lambda * d.data()[((o * ci + i) * kout + y) * kout + x]
    });
    Ok(out)
}

/// Deterministic content hash of every tensor (FNV-1a over names and raw bits).
pub fn params_fingerprint<'t>(params: impl IntoIterator<Item = (String, &'t Tensor)>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, t) in params {
        eat(name.as_bytes());
        for d in t.shape().0 {
            eat(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

pub(crate) fn config_from_pairs(pairs: &BTreeMap<String, String>) -> Result<NetConfig> {
    let get = |key: &str| -> Result<usize> {
        pairs
            .get(key)
            .ok_or_else(|| NetError::InvalidConfig(format!("missing key {key}")))?
            .parse()
            .map_err(|_| NetError::InvalidConfig(format!("bad value for {key}")))
    };
    let adafm_kernel = match pairs.get("adafm_kernel") {
        Some(v) => Some(
            v.parse()
                .map_err(|_| NetError::InvalidConfig("bad value for adafm_kernel".into()))?,
        ),
        None => None,
    };
    let cfg = NetConfig {
        in_channels: get("in_channels")?,
        feat_channels: get("feat_channels")?,
        num_blocks: get("num_blocks")?,
        adafm_kernel,
    };
    cfg.validate()?;
    Ok(cfg)
}
