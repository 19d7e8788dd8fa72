use std::f64::consts::TAU;

use super::{DataError, Image, Result};
use crate::tensor::RandomSource;

const MIN_SIDE: usize = 16;

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn color(rng: &mut RandomSource, channels: usize) -> [f64; 3] {
    let base = rng.uniform();
    let mut c = [base; 3];
    if channels == 3 {
        for v in &mut c {
            *v = (base + rng.uniform_in(-0.35, 0.35)).clamp(0.0, 1.0);
        }
    }
    c
}

/// Deterministic synthetic scene: a smooth gradient, overlapping flat rectangles
/// and ellipses with hard edges, and low-amplitude band-limited texture.
pub fn gen_procedural_image(seed: u64, h: usize, w: usize, channels: usize) -> Result<Image> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(DataError::InvalidArgument(format!(
            "procedural images need at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
        )));
    }
    if !matches!(channels, 1 | 3) {
        return Err(DataError::InvalidArgument(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut rng = RandomSource::derive(seed, 0x1a6e);
    let (hf, wf) = (h as f64, w as f64);

    let c0 = color(&mut rng, channels);
    let c1 = color(&mut rng, channels);
    let angle = rng.uniform_in(0.0, TAU);
    let (dy, dx) = (angle.sin(), angle.cos());

    let n_shapes = 4 + rng.below(6);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cy = rng.uniform_in(0.0, hf);
        let cx = rng.uniform_in(0.0, wf);
        let ry = rng.uniform_in(0.08, 0.3) * hf;
        let rx = rng.uniform_in(0.08, 0.3) * wf;
        let shape = if rng.uniform() < 0.5 {
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        } else {
            Shape::Ellipse { cy, cx, ry, rx }
        };
        shapes.push((shape, color(&mut rng, channels)));
    }

    let waves: Vec<Wave> = (0..6)
        .map(|_| Wave {
            fy: rng.uniform_in(-0.25, 0.25),
            fx: rng.uniform_in(-0.25, 0.25),
            phase: rng.uniform_in(0.0, TAU),
            amp: rng.uniform_in(0.01, 0.04),
        })
        .collect();

    let mut pixels = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = (((yf / hf - 0.5) * dy + (xf / wf - 0.5) * dx) + 0.75) / 1.5;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] + (c1[c] - c0[c]) * t;
            }
            for (shape, col) in &shapes {
                if shape.contains(yf, xf) {
                    px = *col;
                }
            }
            let texture: f64 = waves
                .iter()
                .map(|wv| wv.amp * (TAU * (wv.fy * yf + wv.fx * xf) + wv.phase).sin())
                .sum();
            for v in px.iter().take(channels) {
                pixels.push((v + texture).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(h, w, channels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_dev(v: &[f32]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().map(|&p| p as f64).sum::<f64>() / n;
        (v.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn same_seed_same_image() {
        assert_eq!(gen_procedural_image(5, 32, 40, 3).unwrap(), gen_procedural_image(5, 32, 40, 3).unwrap());
    }

    #[test]
    fn seeds_differ() {
        for seed in 0..20 {
            let a = gen_procedural_image(seed, 48, 48, 3).unwrap();
            let b = gen_procedural_image(seed + 1000, 48, 48, 3).unwrap();
            let mad = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs() as f64).sum::<f64>()
                / a.pixels.len() as f64;
            assert!(mad > 0.01, "seed {seed}: {mad}");
        }
    }

    #[test]
    fn histogram_is_spread() {
        for seed in 0..50 {
            for c in [1, 3] {
                let img = gen_procedural_image(seed, 64, 64, c).unwrap();
                assert!(std_dev(&img.pixels) > 0.05, "seed {seed} channels {c}");
                assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn rejects_tiny_dims() {
        assert!(gen_procedural_image(0, 15, 32, 1).is_err());
        assert!(gen_procedural_image(0, 32, 8, 1).is_err());
        assert!(gen_procedural_image(0, 16, 16, 2).is_err());
    }
}
