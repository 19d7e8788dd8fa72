use super::{DataError, Image, Result, Task};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(DataError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

fn from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR over every sample with peak 1.0; identical images give +∞.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(from_mse(sum / a.pixels.len() as f64))
}

/// PSNR of the BT.601 luma channel. Single-channel images are compared directly.
pub fn psnr_luma(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    if a.channels == 1 {
        return psnr(a, b);
    }
    let sum: f64 = a
        .pixels
        .chunks_exact(3)
        .zip(b.pixels.chunks_exact(3))
        .map(|(p, q)| {
            let d: f64 = (0..3).map(|c| LUMA[c] * (p[c] as f64 - q[c] as f64)).sum();
            d * d
        })
        .sum();
    Ok(from_mse(sum / (a.height * a.width) as f64))
}

/// RGB PSNR for denoising, luma PSNR for super-resolution.
pub fn task_psnr(a: &Image, b: &Image, task: Task) -> Result<f64> {
    match task {
        Task::Denoise => psnr(a, b),
        Task::SuperResolve => psnr_luma(a, b),
    }
}
