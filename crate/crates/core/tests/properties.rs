use adafm_core::data::{
    bicubic_resize, bicubic_weights, decode_pnm, degrade_noise, encode_pnm, gen_procedural_image, psnr, Image, Task,
};
use adafm_core::modulation::{fit_curve, predict_lambda, ModulationPoint};
use adafm_core::net::{decode_checkpoint, encode_checkpoint, AdaFmLayer, BasicNet, Checkpoint, Model, NetConfig};
use adafm_core::tensor::kernels::{self, ConvParams};
use adafm_core::tensor::{AdamConfig, AdamState, RandomSource, Tensor};
use proptest::prelude::*;
use std::sync::Arc;

fn image(seed: u64, h: usize, w: usize, c: usize) -> Image {
    let mut rng = RandomSource::new(seed);
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.uniform() as f32).collect()).unwrap()
}

fn shifted(img: &Image, delta: f32) -> Image {
    Image::new(img.height, img.width, img.channels, img.pixels.iter().map(|v| v + delta).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, c in prop::sample::select(vec![1usize, 3])) {
        let a = image(seed, h, w, c);
        let b = image(seed ^ 0x55, h, w, c);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_strictly_decreases_with_error(seed in any::<u64>(), d1 in 0.001f32..0.2, extra in 0.001f32..0.2) {
        let a = image(seed, 6, 6, 1);
        let p1 = psnr(&a, &shifted(&a, d1)).unwrap();
        let p2 = psnr(&a, &shifted(&a, d1 + extra)).unwrap();
        prop_assert!(p1 > p2);
    }

    #[test]
    fn bicubic_weights_sum_to_one(inp in 1usize..80, out in 1usize..80) {
        for row in bicubic_weights(inp, out) {
            let s: f64 = row.iter().map(|&(_, w)| w).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "{}", s);
            prop_assert!(row.iter().all(|&(i, _)| i < inp));
        }
    }

    #[test]
    fn bicubic_keeps_constants(v in 0.0f32..1.0, h in 1usize..20, w in 1usize..20, oh in 1usize..30, ow in 1usize..30) {
        let img = Image::filled(h, w, 3, v);
        let out = bicubic_resize(&img, oh, ow).unwrap();
        prop_assert!(out.pixels.iter().all(|&p| (p - v).abs() <= 1e-6));
    }

    #[test]
    fn identity_depthwise_conv_is_bit_exact(seed in any::<u64>(), c in 1usize..5, h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let x = RandomSource::new(seed).randn([2, c, h, w], 0.0, 1.0).unwrap();
        let y = AdaFmLayer::identity(c, k).apply(&x).unwrap();
        prop_assert!(y.bit_eq(&x));
    }

    #[test]
    fn pixel_shuffle_round_trips(seed in any::<u64>(), r in 1usize..4, c in 1usize..3, h in 1usize..5, w in 1usize..5) {
        let x = RandomSource::new(seed).randn([1, c * r * r, h, w], 0.0, 1.0).unwrap();
        let y = kernels::pixel_shuffle(&x, r).unwrap();
        prop_assert!(kernels::pixel_unshuffle(&y, r).unwrap().bit_eq(&x));
    }

    /// Each AdaFM output is affine in λ for a fixed layer input.
    #[test]
    fn adafm_output_is_affine_in_lambda(seed in any::<u64>(), c in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = RandomSource::new(seed);
        let mut layer = AdaFmLayer::identity(c, k);
        layer.g = rng.randn([c, 1, k, k], 0.0, 0.5).unwrap();
        layer.b = rng.randn([c, 1, 1, 1], 0.0, 0.5).unwrap();
        let x = rng.randn([1, c, 6, 6], 0.0, 1.0).unwrap();
        let at = |l: f32| layer.interpolate(l).apply(&x).unwrap();
        let (y0, yh, y1) = (at(0.0), at(0.5), at(1.0));
        for ((a, m), b) in y0.data().iter().zip(yh.data()).zip(y1.data()) {
            prop_assert!((m - (a + b) / 2.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn randn_is_deterministic(seed in any::<u64>(), std in 0.0f32..3.0) {
        let a = RandomSource::new(seed).randn([1, 2, 3, 4], 0.5, std).unwrap();
        let b = RandomSource::new(seed).randn([1, 2, 3, 4], 0.5, std).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn adam_leaves_params_alone_on_zero_grad(seed in any::<u64>(), steps in 1u64..6) {
        let mut p = RandomSource::new(seed).randn([1, 1, 2, 3], 0.0, 1.0).unwrap().with_requires_grad(true);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..steps {
            p.zero_grad();
            adam.step(&mut [&mut p]).unwrap();
        }
        prop_assert!(p.bit_eq(&before));
        prop_assert_eq!(adam.step_count(), steps);
    }

    #[test]
    fn pnm_round_trip_is_byte_stable(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, c in prop::sample::select(vec![1usize, 3])) {
        let img = image(seed, h, w, c);
        let bytes = encode_pnm(&img);
        let back = decode_pnm(&bytes).unwrap();
        prop_assert_eq!(encode_pnm(&back), bytes.clone());
        prop_assert_eq!(decode_pnm(&encode_pnm(&back)).unwrap(), back);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable(seed in any::<u64>(), in_ch in prop::sample::select(vec![1usize, 3]), feat in 1usize..5, blocks in 1usize..3, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let cfg = NetConfig { in_channels: in_ch, feat_channels: feat, num_blocks: blocks, adafm_kernel: None };
        let net = Arc::new(BasicNet::new(cfg, &mut RandomSource::new(seed)).unwrap());
        let mut ada = net.insert_adafm(k).unwrap();
        ada.layers[0].b = Tensor::full([feat, 1, 1, 1], 0.25);
        for model in [Model::Basic(net), Model::AdaFm(ada)] {
            let bytes = encode_checkpoint(&Checkpoint::new(model).with_meta("seed", seed)).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_truncation_is_an_error(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let cfg = NetConfig { in_channels: 1, feat_channels: 2, num_blocks: 1, adafm_kernel: None };
        let net = Arc::new(BasicNet::new(cfg, &mut RandomSource::new(seed)).unwrap());
        let bytes = encode_checkpoint(&Checkpoint::new(Model::Basic(net))).unwrap();
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(decode_checkpoint(&bytes[..n]).is_err());
    }

    #[test]
    fn fitted_curves_hit_endpoints(
        la in 0.0f64..1.0,
        width in 0.05f64..1.0,
        lambdas in prop::collection::vec(0.0f64..1.0, 0..7),
        m in 1usize..5,
    ) {
        let lb = la + width;
        let n = lambdas.len();
        let interior: Vec<ModulationPoint> = lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| ModulationPoint { level: la + width * (i + 1) as f64 / (n + 1) as f64, lambda: l, psnr_at_best: 0.0 })
            .collect();
        prop_assume!(n + 1 >= m);
        let fit = fit_curve(Task::Denoise, la, lb, &interior, m).unwrap();
        prop_assert!(fit.curve.evaluate(la).abs() <= 1e-9);
        prop_assert!((fit.curve.evaluate(lb) - 1.0).abs() <= 1e-9);
        if m == n + 1 {
            prop_assert!(fit.max_residual() <= 1e-6, "{}", fit.max_residual());
        }
        for (p, r) in interior.iter().zip(&fit.residuals) {
            prop_assert!((p.lambda - fit.curve.evaluate(p.level) - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn predictions_stay_in_unit_interval(level in -2.0f64..3.0, lambdas in prop::collection::vec(0.0f64..1.0, 3)) {
        let interior: Vec<ModulationPoint> = lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| ModulationPoint { level: 0.1 + 0.05 * (i + 1) as f64, lambda: l, psnr_at_best: 0.0 })
            .collect();
        let fit = fit_curve(Task::Denoise, 0.1, 0.3, &interior, 3).unwrap();
        let p = predict_lambda(&fit.curve, level);
        prop_assert!((0.0..=1.0).contains(&p));
        if level <= 0.1 { prop_assert_eq!(p, 0.0); }
        if level >= 0.3 { prop_assert_eq!(p, 1.0); }
    }
}

#[test]
fn noise_monotonicity_over_seeds() {
    let img = gen_procedural_image(11, 32, 32, 3).unwrap();
    let levels = [0.02, 0.05, 0.1, 0.2];
    let mut mean = vec![0.0; levels.len()];
    for seed in 0..20 {
        for (m, &s) in mean.iter_mut().zip(&levels) {
            let noisy = degrade_noise(&img, s, &mut RandomSource::new(seed)).unwrap();
            *m += psnr(&noisy, &img).unwrap() / 20.0;
        }
    }
    assert!(mean.windows(2).all(|w| w[0] > w[1]), "{mean:?}");
}

#[test]
fn identity_conv_through_public_kernel() {
    let x = RandomSource::new(4).randn([1, 3, 5, 5], 0.0, 1.0).unwrap();
    let id = Tensor::identity_kernels(3, 3);
    let y = kernels::conv2d(&x, &id, &Tensor::zeros([3, 1, 1, 1]), ConvParams::depthwise(3, 3)).unwrap();
    assert!(y.bit_eq(&x));
}
