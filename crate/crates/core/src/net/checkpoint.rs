//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! "AFMC"                      magic
//! u32                         format version (1)
//! u32, bytes                  config text, `key=value` lines (UTF-8)
//! u32                         tensor count
//! per tensor:
//!   u32, bytes                name (UTF-8)
//!   u8                        dtype tag (0 = f32)
//!   u32, u32 × ndim           dims
//!   f32 × prod(dims)          payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{config_from_pairs, AdaFmLayer, AdaFmNet, BasicNet, NetConfig, NetError};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AFMC";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// A network stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Basic(Arc<BasicNet>),
    AdaFm(AdaFmNet),
}

impl Model {
    pub fn config(&self) -> NetConfig {
        match self {
            Model::Basic(n) => n.config(),
            Model::AdaFm(n) => n.config(),
        }
    }

    pub fn base(&self) -> &Arc<BasicNet> {
        match self {
            Model::Basic(n) => n,
            Model::AdaFm(n) => n.base_arc(),
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Basic(n) => n.named_params(),
            Model::AdaFm(n) => {
                let mut v = n.base().named_params();
                v.extend(n.named_adafm_params());
                v
            }
        }
    }
}

/// Network plus free-form metadata (task, levels, seeds).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

const CONFIG_KEYS: [&str; 4] = ["in_channels", "feat_channels", "num_blocks", "adafm_kernel"];

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    fn config_text(&self) -> Result<String> {
        let mut text = String::new();
        for (k, v) in self.model.config().to_pairs() {
            text.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            if CONFIG_KEYS.contains(&k.as_str()) || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Malformed(format!("invalid metadata entry {k:?}")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        Ok(text)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = ckpt.config_text()?;
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    let tensors = ckpt.model.named_tensors();
    put_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        put_u32(&mut out, 4)?;
        for d in t.shape().0 {
            put_u32(&mut out, d)?;
        }
        out.reserve(t.numel() * 4);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.buf.len())),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let text = r.string()?;
    let mut pairs = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line {line:?}")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let config = config_from_pairs(&pairs)?;
    let meta = pairs
        .into_iter()
        .filter(|(k, _)| !CONFIG_KEYS.contains(&k.as_str()))
        .collect();

    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Malformed(format!("tensor {name}: unknown dtype {dtype}")));
        }
        let ndim = r.u32()?;
        if ndim != 4 {
            return Err(CheckpointError::Malformed(format!("tensor {name}: expected 4 dims, got {ndim}")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name}: dims overflow")))?;
        let raw = r.take(numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(Shape(dims), data).map_err(NetError::from)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut base = BasicNet::zeroed(config)?;
    let names: Vec<String> = base.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(base.params_mut()) {
        *slot = take_tensor(&mut tensors, name, slot.shape())?;
    }
    let base = Arc::new(base);
    let model = match config.adafm_kernel {
        None => Model::Basic(base),
        Some(k) => {
            let c = config.feat_channels;
            let layers = (0..2 * config.num_blocks)
                .map(|i| {
                    Ok(AdaFmLayer {
                        g: take_tensor(&mut tensors, &format!("adafm.{i}.g"), Shape::new(c, 1, k, k))?,
                        b: take_tensor(&mut tensors, &format!("adafm.{i}.b"), Shape::new(c, 1, 1, 1))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Model::AdaFm(AdaFmNet::from_parts(base, layers)?)
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { model, meta })
}

fn take_tensor(tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: Shape) -> Result<Tensor> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(CheckpointError::Malformed(format!(
            "tensor {name} has shape {}, expected {shape}",
            t.shape()
        )));
    }
    Ok(t)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RandomSource;

    fn adafm_ckpt() -> Checkpoint {
        let mut rng = RandomSource::new(8);
        let base = Arc::new(BasicNet::new(NetConfig::desk(1), &mut rng).unwrap());
        let mut net = base.insert_adafm(3).unwrap();
        for l in &mut net.layers {
            l.g = rng.randn(l.g.shape(), 0.0, 0.5).unwrap();
            l.b = rng.randn(l.b.shape(), 0.0, 0.5).unwrap();
        }
        Checkpoint::new(Model::AdaFm(net))
            .with_meta("task", "denoise")
            .with_meta("level_a", 0.05)
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let ckpt = adafm_ckpt();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.meta["task"], "denoise");
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&adafm_ckpt()).unwrap();
        assert_eq!(&bytes[..4], b"AFMC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_are_structured_errors() {
        let bytes = encode_checkpoint(&adafm_ckpt()).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(decode_checkpoint(&bytes[..2]), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn reserved_meta_keys_rejected() {
        let ckpt = adafm_ckpt().with_meta("num_blocks", 3);
        assert!(encode_checkpoint(&ckpt).is_err());
    }
}
