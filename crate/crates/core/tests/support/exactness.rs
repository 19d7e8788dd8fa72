//! Random-instance checks for identity insertion, λ endpoints and filter folding.

#![allow(dead_code)]

use std::sync::Arc;

use adafm_core::net::{interpolate_filter, AdaFmLayer, AdaFmNet, BasicNet, NetConfig};
use adafm_core::tensor::kernels::{self, ConvParams};
use adafm_core::tensor::{RandomSource, Tensor};

pub const EQUIVALENCE_TOL: f32 = 1e-5;

fn pick(rng: &mut RandomSource, options: &[usize]) -> usize {
    options[rng.below(options.len())]
}

pub struct Instance {
    pub net: Arc<BasicNet>,
    pub k: usize,
    pub input: Tensor,
}

pub fn random_instance(rng: &mut RandomSource) -> Instance {
    let config = NetConfig {
        in_channels: pick(rng, &[1, 3]),
        feat_channels: pick(rng, &[2, 4, 8]),
        num_blocks: 1 + rng.below(3),
        adafm_kernel: None,
    };
    let net = Arc::new(BasicNet::new(config, &mut RandomSource::new(rng.next_u64())).expect("net"));
    let (n, h, w) = (1 + rng.below(2), 2 * (2 + rng.below(7)), 2 * (2 + rng.below(7)));
    let shape = [n, config.in_channels, h, w];
    Instance {
        net,
        k: pick(rng, &[1, 3, 5, 7]),
        input: rng.randn(shape, 0.5, 0.25).expect("input"),
    }
}

/// Stand-in for a trained AdaFM-Net: identity layers plus Gaussian perturbation.
pub fn perturbed(net: &AdaFmNet, rng: &mut RandomSource) -> AdaFmNet {
    let mut out = net.clone();
    for l in &mut out.layers {
        let noise = rng.randn(l.g.shape(), 0.0, 0.2).expect("noise");
        let g: Vec<f32> = l.g.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        l.g = Tensor::new(l.g.shape(), g).expect("g");
        l.b = rng.randn(l.b.shape(), 0.0, 0.1).expect("b");
    }
    out
}

#[derive(Debug)]
pub struct EndpointCase {
    pub identity_insertion: bool,
    pub lambda0_is_base: bool,
    pub lambda1_is_adapted: bool,
}

impl EndpointCase {
    pub fn passed(&self) -> bool {
        self.identity_insertion && self.lambda0_is_base && self.lambda1_is_adapted
    }
}

pub fn endpoint_cases(seed: u64, count: usize) -> Vec<EndpointCase> {
    let mut rng = RandomSource::new(seed);
    (0..count)
        .map(|_| {
            let inst = random_instance(&mut rng);
            let base = inst.net.forward(&inst.input).expect("base forward");
            let fresh = inst.net.insert_adafm(inst.k).expect("insert");
            let adapted = perturbed(&fresh, &mut rng);
            let (at0, _) = adapted.forward_modulated(&inst.input, 0.0).expect("λ = 0");
            let (at1, _) = adapted.forward_modulated(&inst.input, 1.0).expect("λ = 1");
            EndpointCase {
                identity_insertion: fresh.forward(&inst.input).expect("fresh forward").bit_eq(&base),
                lambda0_is_base: at0.bit_eq(&base),
                lambda1_is_adapted: at1.bit_eq(&adapted.forward(&inst.input).expect("adapted forward")),
            }
        })
        .collect()
}

fn zero_pad(x: &Tensor, p: usize) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    Tensor::from_fn([n, c, h + 2 * p, w + 2 * p], |s, ch, y, xx| {
        if y < p || xx < p || y >= h + p || xx >= w + p {
            0.0
        } else {
            x.data()[((s * c + ch) * h + y - p) * w + xx - p]
        }
    })
}

/// Max abs difference between `x ∗ f_mid` and `g* ∗ (x ∗ f)` for one random
/// `(f, g, λ)`. Both sides run unpadded on an input pre-padded by the folded
/// radius, so borders are compared too.
pub fn equivalence_case(rng: &mut RandomSource) -> f32 {
    let ci = 1 + rng.below(4);
    let co = 1 + rng.below(4);
    let kf = pick(rng, &[1, 3, 5]);
    let kg = pick(rng, &[1, 3, 5, 7]);
    let lambda = rng.uniform() as f32;
    let f = rng.randn([co, ci, kf, kf], 0.0, 0.5).expect("f");
    let mut layer = AdaFmLayer::identity(co, kg);
    let noise = rng.randn([co, 1, kg, kg], 0.0, 0.3).expect("g");
    layer.g = Tensor::new(layer.g.shape(), layer.g.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
        .expect("g");
    let (h, w) = (4 + rng.below(6), 4 + rng.below(6));
    let x = rng.randn([1, ci, h, w], 0.0, 1.0).expect("x");

    let fmid = interpolate_filter(&f, &layer.g, lambda).expect("fold");
    let radius = (kf + kg - 2) / 2;
    let xp = zero_pad(&x, radius);
    let valid = |groups| ConvParams { stride: 1, pad: 0, groups };
    let folded = kernels::conv2d(&xp, &fmid, &Tensor::zeros([co, 1, 1, 1]), valid(1)).expect("folded");
    let mid = kernels::conv2d(&xp, &f, &Tensor::zeros([co, 1, 1, 1]), valid(1)).expect("f");
    let g_star = layer.interpolate(lambda);
    let two_step = kernels::conv2d(&mid, &g_star.g, &g_star.b, valid(co)).expect("g*");
    assert_eq!(folded.shape(), two_step.shape());
    folded.max_abs_diff(&two_step)
}

pub fn equivalence_cases(seed: u64, count: usize) -> Vec<f32> {
    let mut rng = RandomSource::new(seed);
    (0..count).map(|_| equivalence_case(&mut rng)).collect()
}
