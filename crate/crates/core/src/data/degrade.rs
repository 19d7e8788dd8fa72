use super::{DataError, DegradationLevel, Image, Result, Task};
use crate::tensor::RandomSource;

const A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps and normalized weights for each output sample along one axis.
/// Downscaling stretches the kernel by the scale ratio (antialiasing).
/// Source indices are clamped to the edge.
pub fn bicubic_weights(in_size: usize, out_size: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_size as f64 / in_size as f64;
    let support = if scale < 1.0 { 2.0 / scale } else { 2.0 };
    let stretch = scale.min(1.0);
    (0..out_size)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            for j in lo..=hi {
                let wgt = cubic((j as f64 - center) * stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_size as i64 - 1) as usize;
                match taps.iter_mut().find(|(t, _)| *t == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable cubic-convolution resize (a = −0.5), clamped to [0, 1].
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::InvalidArgument(format!("output size {out_h}x{out_w}")));
    }
    let c = img.channels;
    let wx = bicubic_weights(img.width, out_w);
    let wy = bicubic_weights(img.height, out_h);

    let mut rows = vec![0.0f64; img.height * out_w * c];
    for y in 0..img.height {
        for (x, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                rows[(y * out_w + x) * c + ch] = taps.iter().map(|&(s, wt)| wt * img.at(y, s, ch) as f64).sum();
            }
        }
    }
    let mut pixels = Vec::with_capacity(out_h * out_w * c);
    for taps in &wy {
        for x in 0..out_w {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(s, wt)| wt * rows[(s * out_w + x) * c + ch]).sum();
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(out_h, out_w, c, pixels)
}

/// Adds i.i.d. N(0, σ²) noise and clamps.
pub fn degrade_noise(img: &Image, sigma: f64, rng: &mut RandomSource) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DataError::InvalidArgument(format!("noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let pixels = img
        .pixels
        .iter()
        .map(|&p| (p as f64 + sigma * rng.gaussian()).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(img.height, img.width, img.channels, pixels)
}

/// Bicubic downscale by `scale` followed by bicubic upscale to the original size.
pub fn degrade_sr(img: &Image, scale: f64) -> Result<Image> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(DataError::InvalidArgument(format!("sr scale {scale}")));
    }
    let lh = ((img.height as f64 / scale).round() as usize).max(1);
    let lw = ((img.width as f64 / scale).round() as usize).max(1);
    let low = bicubic_resize(img, lh, lw)?;
    bicubic_resize(&low, img.height, img.width)
}

/// Applies the degradation for `level`. The rng is only consumed by denoising.
pub fn degrade(img: &Image, level: DegradationLevel, rng: &mut RandomSource) -> Result<Image> {
    match level.task {
        Task::Denoise => degrade_noise(img, level.level, rng),
        Task::SuperResolve => degrade_sr(img, level.level),
    }
}
