//! JSON bodies of the HTTP API.

use std::collections::BTreeMap;

use adafm_core::data::Image;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

/// `POST /api/restore` body. Exactly one of `lambda` and `level` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreRequest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Base-64 of `width · height · channels` interleaved 8-bit samples.
    pub pixels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: String,
    pub applied_lambda: f64,
    /// The requested λ or the level-derived λ was outside [0, 1] or the curve range.
    pub clamped: bool,
    /// PSNR of the output against the input; `null` when they are identical.
    pub psnr_vs_input: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetInfo {
    pub in_channels: usize,
    pub feat_channels: usize,
    pub num_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub base_total: usize,
    pub residual_block: usize,
    pub adafm_total: usize,
    pub adafm_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveInfo {
    pub task: String,
    pub la: f64,
    pub lb: f64,
    pub order: usize,
    pub coeffs: Vec<f64>,
}

/// `GET /api/info` body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub version: String,
    pub config: NetInfo,
    pub adafm_kernel: usize,
    pub params: ParamInfo,
    pub curve: Option<CurveInfo>,
    /// Empirical bound on mean |Δ pixel| per unit λ, pixels in [0, 1].
    pub lipschitz: f64,
    pub lipschitz_step: f64,
    pub max_width: usize,
    pub max_height: usize,
    pub meta: BTreeMap<String, String>,
}

/// 8-bit quantization, rounding half away from zero.
pub fn to_bytes(img: &Image) -> Vec<u8> {
    img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Option<Image> {
    Image::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect()).ok()
}

pub fn encode_pixels(img: &Image) -> String {
    STANDARD.encode(to_bytes(img))
}

pub fn decode_pixels(text: &str) -> Option<Vec<u8>> {
    STANDARD.decode(text).ok()
}

impl RestoreRequest {
    pub fn new(img: &Image) -> Self {
        RestoreRequest {
            width: img.width,
            height: img.height,
            channels: img.channels,
            pixels: encode_pixels(img),
            lambda: None,
            level: None,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = Some(level);
        self
    }
}
