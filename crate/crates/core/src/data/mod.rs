//! Images, degradations, patch sampling, PSNR and PGM/PPM files.

mod degrade;
mod metrics;
mod patch;
mod pnm;
mod synth;

pub use degrade::{bicubic_resize, bicubic_weights, degrade, degrade_noise, degrade_sr};
pub use metrics::{psnr, psnr_luma, task_psnr};
pub use patch::{sample_patch_batch, PatchBatch, PatchSampler};
pub use pnm::{decode_pnm, encode_pnm, load_pnm, save_pnm};
pub use synth::gen_procedural_image;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image shape mismatch: {0} vs {1}")]
    ShapeMismatch(String, String),
    #[error("malformed image file: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Interleaved row-major image with samples in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(DataError::InvalidArgument(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(DataError::InvalidArgument(format!(
                "{} samples for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn dims(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn clamp01(mut self) -> Self {
        for p in &mut self.pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        self
    }

    /// Planar (1, c, h, w) tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([1, self.channels, self.height, self.width], |_, c, y, x| self.at(y, x, c))
    }

    /// Stacks equally sized images into one (n, c, h, w) tensor.
    pub fn stack(images: &[Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| DataError::InvalidArgument("no images to stack".into()))?;
        if let Some(bad) = images.iter().find(|i| !i.same_shape(first)) {
            return Err(DataError::ShapeMismatch(first.dims(), bad.dims()));
        }
        let (c, h, w) = (first.channels, first.height, first.width);
        Ok(Tensor::from_fn([images.len(), c, h, w], |n, ch, y, x| images[n].at(y, x, ch)))
    }

    /// Sample `n` of a planar tensor, clamped to [0, 1].
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if n >= s.n() || !matches!(s.c(), 1 | 3) {
            return Err(DataError::InvalidArgument(format!("cannot take image {n} from tensor {s}")));
        }
        let (c, h, w) = (s.c(), s.h(), s.w());
        let plane = t.sample(n);
        let mut pixels = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels.push(plane[(ch * h + y) * w + x]);
                }
            }
        }
        Ok(Image::new(h, w, c, pixels)?.clamp01())
    }

    /// Crops the region starting at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(DataError::InvalidArgument(format!(
                "crop {h}x{w} at ({y}, {x}) outside {}",
                self.dims()
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(h * w * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Image::new(h, w, c, pixels)
    }

    /// Extends right/bottom edges by replication so both sides are even.
    pub fn pad_to_even(&self) -> Image {
        let (h, w) = (self.height + self.height % 2, self.width + self.width % 2);
        let c = self.channels;
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels.push(self.at(y.min(self.height - 1), x.min(self.width - 1), ch));
                }
            }
        }
        Image {
            height: h,
            width: w,
            channels: c,
            pixels,
        }
    }
}

/// Restoration task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Additive Gaussian noise with standard deviation σ (pixel units).
    Denoise,
    /// Bicubic down/up-sampling by a scale factor ≥ 1.
    SuperResolve,
}

impl Task {
    pub fn tag(&self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::SuperResolve => "sr",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "sr" | "super_resolve" => Ok(Task::SuperResolve),
            other => Err(DataError::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

/// Task plus severity: σ for denoising, scale factor for super-resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationLevel {
    pub task: Task,
    pub level: f64,
}

impl DegradationLevel {
    pub fn new(task: Task, level: f64) -> Result<Self> {
        let ok = match task {
            Task::Denoise => level >= 0.0,
            Task::SuperResolve => level >= 1.0,
        };
        if !ok || !level.is_finite() {
            return Err(DataError::InvalidArgument(format!("invalid {task} level {level}")));
        }
        Ok(DegradationLevel { task, level })
    }

    pub fn denoise(sigma: f64) -> Result<Self> {
        Self::new(Task::Denoise, sigma)
    }

    pub fn super_resolve(scale: f64) -> Result<Self> {
        Self::new(Task::SuperResolve, scale)
    }
}

impl fmt::Display for DegradationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.task, self.level)
    }
}
