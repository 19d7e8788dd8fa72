use std::path::Path;

use super::{DataError, Image, Result};

fn malformed(msg: impl Into<String>) -> DataError {
    DataError::Malformed(msg.into())
}

/// Encodes as binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| {
        let v = (p.clamp(0.0, 1.0) as f64 * 255.0).round();
        v as u8
    }));
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(format!("bad {what}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(malformed("expected P5 or P6 magic")),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(malformed(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(malformed("zero dimension"));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(malformed("missing separator after header")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| malformed("dimensions overflow"))?;
    let payload = &bytes[hdr.pos..];
    if payload.len() < need {
        return Err(malformed(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(malformed(format!("{} trailing bytes", payload.len() - need)));
    }
    let pixels = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, channels, pixels)
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn save_pnm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}
