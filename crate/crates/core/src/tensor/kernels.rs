//! Forward and backward kernels on raw buffers.
//!
//! Dense convolutions (`groups == 1`) lower to im2col followed by a single-threaded
//! sgemm; grouped and depthwise convolutions use direct loops. Both paths have a
//! fixed accumulation order, so repeated runs are bit-identical. The direct path
//! accumulates every output as `bias + sum over (in-channel, ky, kx)` in that
//! order and skips taps that fall into the zero padding, so a delta kernel with
//! zero bias reproduces its input exactly.

use super::{check_finite, Result, Shape, Tensor, TensorError};

/// Convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn same(k: usize) -> Self {
        ConvParams {
            stride: 1,
            pad: k / 2,
            groups: 1,
        }
    }

    pub const fn depthwise(k: usize, channels: usize) -> Self {
        ConvParams {
            stride: 1,
            pad: k / 2,
            groups: channels,
        }
    }
}

/// Resolved sizes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub p: ConvParams,
}

impl ConvGeom {
    pub fn output_shape(&self) -> Shape {
        Shape::new(self.n, self.co, self.oh, self.ow)
    }

    fn taps(&self) -> usize {
        (self.ci / self.p.groups) * self.k * self.k
    }
}

/// Validates shapes and computes the output size. The output extent is
/// `floor((h + 2·pad − k) / stride) + 1`.
pub fn conv2d_geometry(x: Shape, w: Shape, b: Shape, p: ConvParams) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let invalid = |reason: String| TensorError::InvalidArgument { op: OP, reason };
    let [n, ci, h, wd] = x.0;
    let [co, cig, kh, kw] = w.0;
    if p.groups == 0 || ci % p.groups != 0 || co % p.groups != 0 {
        return Err(invalid(format!(
            "groups {} must divide input channels {ci} and output channels {co}",
            p.groups
        )));
    }
    if cig != ci / p.groups {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: x,
            right: w,
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(invalid(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if b.numel() != co {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: w,
            right: b,
        });
    }
    if !(1..=2).contains(&p.stride) {
        return Err(invalid(format!("stride {} not supported", p.stride)));
    }
    if h + 2 * p.pad < kh || wd + 2 * p.pad < kh {
        return Err(invalid(format!(
            "input {h}x{wd} with padding {} smaller than kernel {kh}",
            p.pad
        )));
    }
    let oh = (h + 2 * p.pad - kh) / p.stride + 1;
    let ow = (wd + 2 * p.pad - kh) / p.stride + 1;
    Ok(ConvGeom {
        n,
        ci,
        h,
        w: wd,
        co,
        k: kh,
        oh,
        ow,
        p,
    })
}

/// Output indices `o` in `[lo, hi)` whose input tap `o·stride + off − pad` lies in `[0, len)`.
#[inline]
fn valid_range(off: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if len + pad > off {
        ((len - 1 + pad - off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], isize, isize),
    b: (&[f32], isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    let max_index = |rs: isize, cs: isize, rows: usize, cols: usize| {
        (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs
    };
    assert!(max_index(a.1, a.2, m, k) < a.0.len() as isize);
    assert!(max_index(b.1, b.2, k, n) < b.0.len() as isize);
    assert!(m * n <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the routine touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one sample (ci, h, w) into a (ci·k·k, oh·ow) matrix.
fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (k, s, pad) = (g.k, g.p.stride, g.p.pad);
    let np = g.oh * g.ow;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * np..][..np];
                row.fill(0.0);
                let (ylo, yhi) = valid_range(ky, pad, s, g.h, g.oh);
                let (xlo, xhi) = valid_range(kx, pad, s, g.w, g.ow);
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * s + ky - pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if s == 1 {
                        let ix0 = xlo + kx - pad;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Folds a (ci·k·k, oh·ow) matrix back, accumulating into one sample gradient.
fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (k, s, pad) = (g.k, g.p.stride, g.p.pad);
    let np = g.oh * g.ow;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * np..][..np];
                let (ylo, yhi) = valid_range(ky, pad, s, g.h, g.oh);
                let (xlo, xhi) = valid_range(kx, pad, s, g.w, g.ow);
                for oy in ylo..yhi {
                    let iy = oy * s + ky - pad;
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[ox * s + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding, optional grouping and bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, p: ConvParams) -> Result<Tensor> {
    let g = conv2d_geometry(x.shape(), w.shape(), b.shape(), p)?;
    let mut out = vec![0.0f32; g.output_shape().numel()];
    if p.groups == 1 {
        conv_dense_forward(x.data(), w.data(), b.data(), &g, &mut out);
    } else {
        conv_direct_forward(x.data(), w.data(), b.data(), &g, &mut out);
    }
    check_finite("conv2d", &out);
    Tensor::new(g.output_shape(), out)
}

fn conv_dense_forward(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let taps = g.taps();
    let np = g.oh * g.ow;
    let mut col = vec![0.0f32; taps * np];
    for n in 0..g.n {
        im2col(&x[n * g.ci * g.h * g.w..][..g.ci * g.h * g.w], g, &mut col);
        let out_n = &mut out[n * g.co * np..][..g.co * np];
        for (oc, plane) in out_n.chunks_exact_mut(np).enumerate() {
            plane.fill(b[oc]);
        }
        sgemm(
            g.co,
            taps,
            np,
            (w, taps as isize, 1),
            (&col, np as isize, 1),
            1.0,
            out_n,
        );
    }
}

fn conv_direct_forward(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (k, s, pad) = (g.k, g.p.stride, g.p.pad);
    let cin_g = g.ci / g.p.groups;
    let cout_g = g.co / g.p.groups;
    let np = g.oh * g.ow;
    let in_plane = g.h * g.w;
    for n in 0..g.n {
        for oc in 0..g.co {
            let grp = oc / cout_g;
            let o = &mut out[(n * g.co + oc) * np..][..np];
            o.fill(b[oc]);
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xp = &x[(n * g.ci + ic) * in_plane..][..in_plane];
                let wk = &w[(oc * cin_g + icl) * k * k..][..k * k];
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(ky, pad, s, g.h, g.oh);
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let (xlo, xhi) = valid_range(kx, pad, s, g.w, g.ow);
                        if xlo == xhi {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - pad;
                            let src = &xp[iy * g.w..(iy + 1) * g.w];
                            let dst = &mut o[oy * g.ow..(oy + 1) * g.ow];
                            if s == 1 {
                                let ix0 = xlo + kx - pad;
                                for (d, v) in dst[xlo..xhi].iter_mut().zip(&src[ix0..]) {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    dst[ox] += wv * src[ox * s + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution; each entry is `None` unless requested.
#[derive(Debug, Default)]
pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

/// Backward pass of [`conv2d`] given the upstream gradient `dout`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &[f32],
    p: ConvParams,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let co = w.shape().n();
    let g = conv2d_geometry(x.shape(), w.shape(), Shape::new(co, 1, 1, 1), p)?;
    if dout.len() != g.output_shape().numel() {
        return Err(TensorError::DataLength {
            shape: g.output_shape(),
            len: dout.len(),
        });
    }
    let [need_dx, need_dw, need_db] = need;
    let mut grads = ConvGrads::default();
    if need_dx || need_dw {
        let mut dx = need_dx.then(|| vec![0.0f32; x.numel()]);
        let mut dw = need_dw.then(|| vec![0.0f32; w.numel()]);
        if p.groups == 1 {
            conv_dense_backward(x.data(), w.data(), dout, &g, dx.as_deref_mut(), dw.as_deref_mut());
        } else {
            conv_direct_backward(x.data(), w.data(), dout, &g, dx.as_deref_mut(), dw.as_deref_mut());
        }
        grads.dx = dx;
        grads.dw = dw;
    }
    if need_db {
        let np = g.oh * g.ow;
        let mut db = vec![0.0f32; g.co];
        for n in 0..g.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += dout[(n * g.co + oc) * np..][..np].iter().sum::<f32>();
            }
        }
        grads.db = Some(db);
    }
    Ok(grads)
}

fn conv_dense_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let taps = g.taps();
    let np = g.oh * g.ow;
    let sample = g.ci * g.h * g.w;
    let mut col = vec![0.0f32; taps * np];
    for n in 0..g.n {
        let dout_n = &dout[n * g.co * np..][..g.co * np];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * sample..][..sample], g, &mut col);
            // dW (co × taps) += dOut (co × np) · colᵀ (np × taps)
            sgemm(
                g.co,
                np,
                taps,
                (dout_n, np as isize, 1),
                (&col, 1, np as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol (taps × np) = Wᵀ (taps × co) · dOut (co × np)
            sgemm(
                taps,
                g.co,
                np,
                (w, 1, taps as isize),
                (dout_n, np as isize, 1),
                0.0,
                &mut col,
            );
            col2im(&col, g, &mut dx[n * sample..][..sample]);
        }
    }
}

fn conv_direct_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let (k, s, pad) = (g.k, g.p.stride, g.p.pad);
    let cin_g = g.ci / g.p.groups;
    let cout_g = g.co / g.p.groups;
    let np = g.oh * g.ow;
    let in_plane = g.h * g.w;
    for n in 0..g.n {
        for oc in 0..g.co {
            let grp = oc / cout_g;
            let d = &dout[(n * g.co + oc) * np..][..np];
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xoff = (n * g.ci + ic) * in_plane;
                let woff = (oc * cin_g + icl) * k * k;
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(ky, pad, s, g.h, g.oh);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(kx, pad, s, g.w, g.ow);
                        let wv = w[woff + ky * k + kx];
                        let mut wacc = 0.0f32;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - pad;
                            let drow = &d[oy * g.ow..(oy + 1) * g.ow];
                            let rbase = xoff + iy * g.w;
                            if dw.is_some() {
                                let xrow = &x[rbase..rbase + g.w];
                                for ox in xlo..xhi {
                                    wacc += drow[ox] * xrow[ox * s + kx - pad];
                                }
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let xrow = &mut dx[rbase..rbase + g.w];
                                for ox in xlo..xhi {
                                    xrow[ox * s + kx - pad] += wv * drow[ox];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[woff + ky * k + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Passes `dout` where the input was strictly positive.
pub fn relu_backward(x: &[f32], dout: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dout)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

fn shuffle_check(s: Shape, r: usize) -> Result<()> {
    if r == 0 || s.c() % (r * r) != 0 {
        return Err(TensorError::InvalidArgument {
            op: "pixel_shuffle",
            reason: format!("channels {} not divisible by {}", s.c(), r * r),
        });
    }
    Ok(())
}

/// Depth-to-space: (n, c·r², h, w) → (n, c, h·r, w·r) with
/// `out[c][y·r + i][x·r + j] = in[c·r² + i·r + j][y][x]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    shuffle_check(s, r)?;
    let oc = s.c() / (r * r);
    let out_shape = Shape::new(s.n(), oc, s.h() * r, s.w() * r);
    let mut out = vec![0.0f32; s.numel()];
    shuffle_map(s, r, |src, dst| out[dst] = x.data()[src]);
    Tensor::new(out_shape, out)
}

/// Exact inverse of [`pixel_shuffle`]: (n, c, h·r, w·r) → (n, c·r², h, w).
pub fn pixel_unshuffle(y: &Tensor, r: usize) -> Result<Tensor> {
    let s = y.shape();
    if r == 0 || s.h() % r != 0 || s.w() % r != 0 {
        return Err(TensorError::InvalidArgument {
            op: "pixel_unshuffle",
            reason: format!("spatial size {}x{} not divisible by {r}", s.h(), s.w()),
        });
    }
    let in_shape = Shape::new(s.n(), s.c() * r * r, s.h() / r, s.w() / r);
    let mut out = vec![0.0f32; s.numel()];
    shuffle_map(in_shape, r, |src, dst| out[src] = y.data()[dst]);
    Tensor::new(in_shape, out)
}

/// Calls `f(src, dst)` for every element of a shuffle from input shape `s`.
fn shuffle_map(s: Shape, r: usize, mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = s.0;
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    for b in 0..n {
        for ch in 0..c {
            let (o, i, j) = (ch / (r * r), (ch / r) % r, ch % r);
            for y in 0..h {
                let src_row = ((b * c + ch) * h + y) * w;
                let dst_row = ((b * oc + o) * oh + y * r + i) * ow;
                for x in 0..w {
                    f(src_row + x, dst_row + x * r + j);
                }
            }
        }
    }
}

pub fn pixel_shuffle_backward(dout: &[f32], in_shape: Shape, r: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; in_shape.numel()];
    shuffle_map(in_shape, r, |src, dst| dx[src] = dout[dst]);
    dx
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("add", x, y)?;
    let data: Vec<f32> = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    check_finite("add", &data);
    Tensor::new(x.shape(), data)
}

pub(crate) fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: x.shape(),
            right: y.shape(),
        });
    }
    Ok(())
}

/// Mean absolute error, accumulated in f64.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f32> {
    same_shape("l1_loss", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok((sum / pred.numel().max(1) as f64) as f32)
}

/// Subgradient `sign(pred − target) / count`, zero at ties.
pub fn l1_loss_backward(pred: &[f32], target: &[f32], dloss: f32) -> Vec<f32> {
    let scale = dloss / pred.len().max(1) as f32;
    pred.iter()
        .zip(target)
        .map(|(a, b)| {
            if a > b {
                scale
            } else if a < b {
                -scale
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean squared error, accumulated in f64.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f32> {
    same_shape("mse_loss", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok((sum / pred.numel().max(1) as f64) as f32)
}

pub fn mse_loss_backward(pred: &[f32], target: &[f32], dloss: f32) -> Vec<f32> {
    let scale = 2.0 * dloss / pred.len().max(1) as f32;
    pred.iter().zip(target).map(|(a, b)| scale * (a - b)).collect()
}
