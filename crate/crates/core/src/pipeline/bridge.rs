use super::{evaluate, EvalSet, Restorer, Result};
use crate::net::{BasicNet, ConvHook, ConvSite, NetError};
use crate::tensor::kernels::{self, ConvParams};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeConfig {
    pub kernel: usize,
    pub steps: usize,
    pub lr: f32,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            kernel: 3,
            steps: 500,
            lr: 1e-2,
        }
    }
}

/// Depthwise filter fitted after one convolution of the source network.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeLayer {
    pub name: String,
    pub g: Tensor,
    pub b: Tensor,
    /// Mean squared mismatch with identity g (no bridging).
    pub initial_residual: f64,
    /// Mean squared mismatch after fitting.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeResult {
    pub kernel: usize,
    pub layers: Vec<BridgeLayer>,
    pub psnr_source: f64,
    pub psnr_target: f64,
    pub psnr_bridged: f64,
}

impl BridgeResult {
    /// `|PSNR(target) − PSNR(source)|`.
    pub fn raw_gap(&self) -> f64 {
        (self.psnr_target - self.psnr_source).abs()
    }

    /// `|PSNR(target) − PSNR(bridged source)|`.
    pub fn bridged_gap(&self) -> f64 {
        (self.psnr_target - self.psnr_bridged).abs()
    }

    /// Per-layer report as `layer,initial_residual,residual` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,initial_residual,residual\n");
        for l in &self.layers {
            s.push_str(&format!("{},{:e},{:e}\n", l.name, l.initial_residual, l.residual));
        }
        s
    }
}

struct Capture {
    inputs: Vec<Tensor>,
}

impl<'a> ConvHook<'a> for Capture {
    fn before_conv(&mut self, tape: &Tape<'a>, _site: ConvSite, input: Var) {
        self.inputs.push(tape.value(input).clone());
    }
}

struct Bridge<'a> {
    layers: &'a [BridgeLayer],
}

impl<'a> ConvHook<'a> for Bridge<'a> {
    fn after_conv(&mut self, tape: &mut Tape<'a>, site: ConvSite, out: Var) -> crate::net::Result<Var> {
        let l = &self.layers[site.index];
        let g = tape.frozen(&l.g);
        let b = tape.frozen(&l.b);
        Ok(tape.conv2d(out, g, b, depthwise(&l.g))?)
    }
}

/// Source network with a fitted filter after every convolution.
pub struct Bridged<'n> {
    pub net: &'n BasicNet,
    pub layers: &'n [BridgeLayer],
}

impl Restorer for Bridged<'_> {
    fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward_with(x, &mut Bridge { layers: self.layers })?)
    }
}

fn depthwise(g: &Tensor) -> ConvParams {
    ConvParams::depthwise(g.shape().h(), g.shape().n())
}

fn fit_layer(source: &Tensor, target: &Tensor, cfg: &BridgeConfig) -> Result<(Tensor, Tensor, f64, f64)> {
    let c = source.shape().c();
    let mut g = Tensor::identity_kernels(c, cfg.kernel).with_requires_grad(true);
    let mut b = Tensor::zeros([c, 1, 1, 1]).with_requires_grad(true);
    let residual = |g: &Tensor, b: &Tensor| -> Result<f64> {
        let y = kernels::conv2d(source, g, b, depthwise(g))?;
        Ok(kernels::mse_loss(&y, target)? as f64)
    };
    let initial = residual(&g, &b)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &[&g, &b],
    );
    for step in 0..cfg.steps {
        let grads = {
            let mut tape = Tape::new();
            let x = tape.frozen(source);
            let gv = tape.leaf(&g);
            let bv = tape.leaf(&b);
            let y = tape.conv2d(x, gv, bv, depthwise(&g))?;
            let t = tape.frozen(target);
            let l = tape.mse_loss(y, t)?;
            let grads = tape.backward(l)?;
            (grads.get(gv).map(<[f32]>::to_vec), grads.get(bv).map(<[f32]>::to_vec))
        };
        for (p, d) in [(&mut g, grads.0), (&mut b, grads.1)] {
            p.zero_grad();
            if let Some(d) = d {
                p.accumulate_grad(&d)?;
            }
        }
        if step == cfg.steps * 2 / 3 {
            adam.set_lr(cfg.lr * 0.1);
        }
        adam.step(&mut [&mut g, &mut b])?;
    }
    let fitted = residual(&g, &b)?;
    g.set_requires_grad(false);
    b.set_requires_grad(false);
    Ok((g, b, initial, fitted))
}

/// Fits, for every convolution independently, a depthwise filter `g` (plus bias)
/// applied after the source filter so that it reproduces the target filter's
/// response on the source network's own feature maps for `probe`.
/// End-to-end PSNRs are measured on `eval`.
pub fn filter_bridge(
    source: &BasicNet,
    target: &BasicNet,
    cfg: &BridgeConfig,
    probe: &Tensor,
    eval: &EvalSet,
) -> Result<BridgeResult> {
    if source.config() != target.config() {
        return Err(NetError::ArchitectureMismatch(format!("{:?} vs {:?}", source.config(), target.config())).into());
    }
    if cfg.kernel % 2 == 0 {
        return Err(NetError::EvenKernel(cfg.kernel).into());
    }
    let mut capture = Capture { inputs: Vec::new() };
    source.forward_with(probe, &mut capture)?;
    let names = source.conv_names();
    let mut layers = Vec::with_capacity(names.len());
    for (((name, x), fa), fb) in names.into_iter().zip(&capture.inputs).zip(source.convs()).zip(target.convs()) {
        let ya = kernels::conv2d(x, &fa.weight, &fa.bias, fa.params())?;
        let yb = kernels::conv2d(x, &fb.weight, &fb.bias, fb.params())?;
        let (g, b, initial_residual, residual) = fit_layer(&ya, &yb, cfg)?;
        log::debug!("bridge {name}: residual {initial_residual:e} -> {residual:e}");
        layers.push(BridgeLayer {
            name,
            g,
            b,
            initial_residual,
            residual,
        });
    }
    let psnr_bridged = evaluate(
        &Bridged {
            net: source,
            layers: &layers,
        },
        eval,
    )?;
    Ok(BridgeResult {
        kernel: cfg.kernel,
        psnr_source: evaluate(source, eval)?,
        psnr_target: evaluate(target, eval)?,
        psnr_bridged,
        layers,
    })
}
