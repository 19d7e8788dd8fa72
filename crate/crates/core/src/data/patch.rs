use super::{degrade_noise, degrade_sr, DataError, DegradationLevel, Image, Result, Task};
use crate::tensor::{RandomSource, Tensor};

/// Paired degraded/clean patches in (n, c, p, p) layout.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub lq: Tensor,
    pub gt: Tensor,
    pub level: DegradationLevel,
}

/// One of the 8 symmetries of the square: bit 0 flips columns, bit 1 flips
/// rows, bit 2 transposes first.
fn dihedral(img: &Image, t: usize) -> Image {
    let n = img.height;
    let c = img.channels;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..n {
        for x in 0..n {
            let (mut sy, mut sx) = (y, x);
            if t & 2 != 0 {
                sy = n - 1 - sy;
            }
            if t & 1 != 0 {
                sx = n - 1 - sx;
            }
            if t & 4 != 0 {
                std::mem::swap(&mut sy, &mut sx);
            }
            for ch in 0..c {
                pixels.push(img.at(sy, sx, ch));
            }
        }
    }
    Image {
        height: n,
        width: n,
        channels: c,
        pixels,
    }
}

fn draw(
    clean: &[Image],
    degraded: Option<&[Image]>,
    level: DegradationLevel,
    p: usize,
    n: usize,
    rng: &mut RandomSource,
) -> Result<PatchBatch> {
    if clean.is_empty() || n == 0 || p == 0 {
        return Err(DataError::InvalidArgument("need images, a batch size and a patch size".into()));
    }
    if let Some(img) = clean.iter().find(|i| i.height < p || i.width < p) {
        return Err(DataError::InvalidArgument(format!("patch {p} larger than image {}", img.dims())));
    }
    let mut lq = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.below(clean.len());
        let y = rng.below(clean[i].height - p + 1);
        let x = rng.below(clean[i].width - p + 1);
        let t = rng.below(8);
        let g = clean[i].crop(y, x, p, p)?;
        let l = match degraded {
            Some(d) => d[i].crop(y, x, p, p)?,
            None => degrade_noise(&g, level.level, rng)?,
        };
        lq.push(dihedral(&l, t));
        gt.push(dihedral(&g, t));
    }
    Ok(PatchBatch {
        lq: Image::stack(&lq)?,
        gt: Image::stack(&gt)?,
        level,
    })
}

fn precompute(images: &[Image], level: DegradationLevel) -> Result<Option<Vec<Image>>> {
    match level.task {
        Task::Denoise => Ok(None),
        Task::SuperResolve => images.iter().map(|i| degrade_sr(i, level.level)).collect::<Result<_>>().map(Some),
    }
}

/// Draws `n` random `p`×`p` crops with a random flip/rotation shared by the
/// degraded and clean patch.
pub fn sample_patch_batch(
    images: &[Image],
    level: DegradationLevel,
    p: usize,
    n: usize,
    rng: &mut RandomSource,
) -> Result<PatchBatch> {
    let degraded = precompute(images, level)?;
    draw(images, degraded.as_deref(), level, p, n, rng)
}

/// Reusable sampler whose batch `step` depends only on (seed, step).
#[derive(Clone, Debug)]
pub struct PatchSampler {
    clean: Vec<Image>,
    degraded: Option<Vec<Image>>,
    level: DegradationLevel,
    patch: usize,
    batch: usize,
    seed: u64,
}

impl PatchSampler {
    pub fn new(images: Vec<Image>, level: DegradationLevel, patch: usize, batch: usize, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(DataError::InvalidArgument("empty training set".into()));
        }
        if let Some(img) = images.iter().find(|i| i.height < patch || i.width < patch) {
            return Err(DataError::InvalidArgument(format!("patch {patch} larger than image {}", img.dims())));
        }
        let degraded = precompute(&images, level)?;
        Ok(PatchSampler {
            clean: images,
            degraded,
            level,
            patch,
            batch,
            seed,
        })
    }

    pub fn level(&self) -> DegradationLevel {
        self.level
    }

    pub fn batch(&self, step: u64) -> Result<PatchBatch> {
        let mut rng = RandomSource::derive(self.seed, step);
        draw(&self.clean, self.degraded.as_deref(), self.level, self.patch, self.batch, &mut rng)
    }
}
