//! Naive f64 reference ops and central finite-difference gradient checks
//! against the tape.
//!
//! The reference ops share no code with the library. Finite differences are
//! taken on the f64 reference, so the step size only has to stay clear of
//! kinks, not of f32 round-off. A probe whose perturbation flips the sign of
//! any relu input or l1 difference is skipped and counted.

#![allow(dead_code)]

use adafm_core::tensor::kernels::ConvParams;
use adafm_core::tensor::{RandomSource, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const KINK_MARGIN: f64 = 0.01;
pub const SHAPES_PER_OP: usize = 20;
pub const FORWARD_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Arr {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Arr {
            shape: t.shape().0,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + y) * w + x
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }
}

/// Records which side of every kink the forward pass landed on, and the
/// closest approach to any kink.
#[derive(Debug)]
pub struct Kinks {
    sides: Vec<bool>,
    pub margin: f64,
}

impl Default for Kinks {
    fn default() -> Self {
        Kinks {
            sides: Vec::new(),
            margin: f64::INFINITY,
        }
    }
}

impl PartialEq for Kinks {
    fn eq(&self, other: &Self) -> bool {
        self.sides == other.sides
    }
}

impl Kinks {
    fn record(&mut self, v: f64) {
        self.sides.push(v > 0.0);
        self.margin = self.margin.min(v.abs());
    }
}

pub fn conv(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize, groups: usize) -> Arr {
    let [n, ci, h, wd] = x.shape;
    let [co, cig, k, _] = w.shape;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let cog = co / groups;
    let mut out = Arr::zeros([n, co, oh, ow]);
    for s in 0..n {
        for o in 0..co {
            let g = o / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[o];
                    for i in 0..cig {
                        let c = g * cig + i;
                        debug_assert!(c < ci);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(s, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    let at = out.idx(s, o, oy, ox);
                    out.data[at] = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Arr, kinks: &mut Kinks) -> Arr {
    x.data.iter().for_each(|&v| kinks.record(v));
    Arr {
        shape: x.shape,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn add(x: &Arr, y: &Arr) -> Arr {
    assert_eq!(x.shape, y.shape);
    Arr {
        shape: x.shape,
        data: x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect(),
    }
}

/// Depth-to-space: output (c, y·r + i, x·r + j) reads input (c·r² + i·r + j, y, x).
pub fn shuffle(x: &Arr, r: usize) -> Arr {
    let [n, c, h, w] = x.shape;
    let co = c / (r * r);
    let mut out = Arr::zeros([n, co, h * r, w * r]);
    for s in 0..n {
        for oc in 0..co {
            for y in 0..h * r {
                for xx in 0..w * r {
                    let ic = oc * r * r + (y % r) * r + xx % r;
                    let at = out.idx(s, oc, y, xx);
                    out.data[at] = x.at(s, ic, y / r, xx / r);
                }
            }
        }
    }
    out
}

pub fn l1(pred: &Arr, target: &Arr, kinks: &mut Kinks) -> f64 {
    pred.data.iter().zip(&target.data).for_each(|(p, t)| kinks.record(p - t));
    pred.data.iter().zip(&target.data).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.data.len() as f64
}

pub fn mse(pred: &Arr, target: &Arr) -> f64 {
    pred.data.iter().zip(&target.data).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.data.len() as f64
}

pub fn dot(x: &Arr, r: &Arr) -> f64 {
    x.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

#[derive(Debug)]
pub struct Check {
    pub op: &'static str,
    pub shapes: String,
    /// `max |analytic − numeric| / max |numeric|` over every checked coordinate.
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// `max |forward − reference| / max |reference|`, where a reference forward exists.
    pub forward_err: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err <= REL_TOL && self.forward_err <= FORWARD_TOL && self.checked > 0 && self.skipped * 10 <= self.checked
    }
}

/// Compares `analytic` gradients against central differences of `oracle`
/// with respect to every element of every input.
pub fn check(
    op: &'static str,
    inputs: &[Tensor],
    oracle: &dyn Fn(&[Arr], &mut Kinks) -> f64,
    analytic: &[Vec<f32>],
) -> Check {
    let mut arrs: Vec<Arr> = inputs.iter().map(Arr::from_tensor).collect();
    let mut base_kinks = Kinks::default();
    oracle(&arrs, &mut base_kinks);
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for i in 0..arrs.len() {
        for j in 0..arrs[i].data.len() {
            let v = arrs[i].data[j];
            let mut kp = Kinks::default();
            let mut km = Kinks::default();
            arrs[i].data[j] = v + FD_EPS;
            let lp = oracle(&arrs, &mut kp);
            arrs[i].data[j] = v - FD_EPS;
            let lm = oracle(&arrs, &mut km);
            arrs[i].data[j] = v;
            if kp != base_kinks || km != base_kinks {
                skipped += 1;
                continue;
            }
            num.push((lp - lm) / (2.0 * FD_EPS));
            ana.push(analytic[i][j] as f64);
        }
    }
    let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let err = num.iter().zip(&ana).fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
    Check {
        op,
        shapes: inputs.iter().map(|t| t.shape().to_string()).collect::<Vec<_>>().join(" "),
        rel_err: err / scale,
        checked: num.len(),
        skipped,
        forward_err: 0.0,
    }
}

fn grads_of(tape: &Tape<'_>, loss: Var, vars: &[Var]) -> Vec<Vec<f32>> {
    let g = tape.backward(loss).expect("backward");
    vars.iter()
        .map(|&v| g.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect()
}

fn tracked(t: Tensor) -> Tensor {
    t.with_requires_grad(true)
}

fn randn(rng: &mut RandomSource, shape: [usize; 4], std: f32) -> Tensor {
    rng.randn(shape, 0.0, std).expect("randn")
}

/// Values at least `KINK_MARGIN` away from zero.
fn away_from_zero(rng: &mut RandomSource, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = KINK_MARGIN + rng.uniform_in(0.0, 1.0);
            (if rng.uniform() < 0.5 { -m } else { m }) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("tensor")
}

fn pick(rng: &mut RandomSource, options: &[usize]) -> usize {
    options[rng.below(options.len())]
}

fn conv_case(rng: &mut RandomSource) -> Check {
    let n = 1 + rng.below(2);
    let k = pick(rng, &[1, 3, 5]);
    let stride = 1 + rng.below(2);
    let pad = rng.below(k / 2 + 1);
    let groups = pick(rng, &[1, 1, 2, 0]);
    let (ci, co, groups) = match groups {
        0 => {
            let c = 1 + rng.below(4);
            (c, c, c)
        }
        g => (g * (1 + rng.below(3)), g * (1 + rng.below(3)), g),
    };
    let lo = k.saturating_sub(2 * pad).max(1);
    let h = lo + rng.below(5);
    let w = lo + rng.below(5);
    let x = tracked(randn(rng, [n, ci, h, w], 1.0));
    let wt = tracked(randn(rng, [co, ci / groups, k, k], 0.5));
    let b = tracked(randn(rng, [co, 1, 1, 1], 0.5));
    let p = ConvParams { stride, pad, groups };
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&wt), tape.leaf(&b));
    let y = tape.conv2d(xv, wv, bv, p).expect("conv");
    let r = randn(rng, tape.value(y).shape().0, 1.0);
    let ra = Arr::from_tensor(&r);
    let loss = tape.weighted_sum(y, r).expect("weighted sum");
    let analytic = grads_of(&tape, loss, &[xv, wv, bv]);
    let reference = conv(&Arr::from_tensor(&x), &Arr::from_tensor(&wt), &Arr::from_tensor(&b), stride, pad, groups);
    let got = Arr::from_tensor(tape.value(y));
    assert_eq!(got.shape, reference.shape);
    let scale = reference.data.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let forward_err = got.data.iter().zip(&reference.data).fold(0.0f64, |m, (a, r)| m.max((a - r).abs())) / scale;
    let oracle = move |a: &[Arr], _: &mut Kinks| dot(&conv(&a[0], &a[1], &a[2], stride, pad, groups), &ra);
    let mut c = check("conv2d", &[x, wt, b], &oracle, &analytic);
    c.forward_err = forward_err;
    c.shapes = format!("{} stride {stride} pad {pad} groups {groups}", c.shapes);
    c
}

fn relu_case(rng: &mut RandomSource) -> Check {
    let shape = [1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6)];
    let x = tracked(away_from_zero(rng, shape));
    let r = randn(rng, shape, 1.0);
    let ra = Arr::from_tensor(&r);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = tape.relu(xv);
    let loss = tape.weighted_sum(y, r).expect("weighted sum");
    let analytic = grads_of(&tape, loss, &[xv]);
    let oracle = move |a: &[Arr], k: &mut Kinks| dot(&relu(&a[0], k), &ra);
    check("relu", &[x], &oracle, &analytic)
}

fn add_case(rng: &mut RandomSource) -> Check {
    let shape = [1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6)];
    let x = tracked(randn(rng, shape, 1.0));
    let y = tracked(randn(rng, shape, 1.0));
    let r = randn(rng, shape, 1.0);
    let ra = Arr::from_tensor(&r);
    let mut tape = Tape::new();
    let (xv, yv) = (tape.leaf(&x), tape.leaf(&y));
    let s = tape.add(xv, yv).expect("add");
    let loss = tape.weighted_sum(s, r).expect("weighted sum");
    let analytic = grads_of(&tape, loss, &[xv, yv]);
    let oracle = move |a: &[Arr], _: &mut Kinks| dot(&add(&a[0], &a[1]), &ra);
    check("add", &[x, y], &oracle, &analytic)
}

fn shuffle_case(rng: &mut RandomSource) -> Check {
    let r = 1 + rng.below(3);
    let shape = [1 + rng.below(2), r * r * (1 + rng.below(2)), 1 + rng.below(4), 1 + rng.below(4)];
    let x = tracked(randn(rng, shape, 1.0));
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = tape.pixel_shuffle(xv, r).expect("shuffle");
    let wts = randn(rng, tape.value(y).shape().0, 1.0);
    let wa = Arr::from_tensor(&wts);
    let loss = tape.weighted_sum(y, wts).expect("weighted sum");
    let analytic = grads_of(&tape, loss, &[xv]);
    let oracle = move |a: &[Arr], _: &mut Kinks| dot(&shuffle(&a[0], r), &wa);
    let mut c = check("pixel_shuffle", &[x], &oracle, &analytic);
    c.shapes = format!("{} r {r}", c.shapes);
    c
}

fn l1_case(rng: &mut RandomSource) -> Check {
    let shape = [1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(5)];
    let t = randn(rng, shape, 1.0);
    let gap = away_from_zero(rng, shape);
    let pred = Tensor::new(shape, t.data().iter().zip(gap.data()).map(|(a, b)| a + b).collect()).expect("tensor");
    let (pred, t) = (tracked(pred), tracked(t));
    let mut tape = Tape::new();
    let (pv, tv) = (tape.leaf(&pred), tape.leaf(&t));
    let loss = tape.l1_loss(pv, tv).expect("l1");
    let analytic = grads_of(&tape, loss, &[pv, tv]);
    let oracle = |a: &[Arr], k: &mut Kinks| l1(&a[0], &a[1], k);
    check("l1_loss", &[pred, t], &oracle, &analytic)
}

fn mse_case(rng: &mut RandomSource) -> Check {
    let shape = [1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(5)];
    let pred = tracked(randn(rng, shape, 1.0));
    let t = tracked(randn(rng, shape, 1.0));
    let mut tape = Tape::new();
    let (pv, tv) = (tape.leaf(&pred), tape.leaf(&t));
    let loss = tape.mse_loss(pv, tv).expect("mse");
    let analytic = grads_of(&tape, loss, &[pv, tv]);
    let oracle = |a: &[Arr], _: &mut Kinks| mse(&a[0], &a[1]);
    check("mse_loss", &[pred, t], &oracle, &analytic)
}

/// `l1(shuffle(conv3(x + conv2(relu(conv1(x))))), t)`: every op, with `x`
/// reaching the loss along two paths.
fn chain_oracle(a: &[Arr], t: &Arr, k: &mut Kinks) -> f64 {
    let h = conv(&a[0], &a[1], &a[2], 1, 1, 1);
    let h = relu(&h, k);
    let h = conv(&h, &a[3], &a[4], 1, 1, 1);
    let h = add(&a[0], &h);
    let h = conv(&h, &a[5], &a[6], 1, 0, 1);
    l1(&shuffle(&h, 2), t, k)
}

/// Redraws until every relu input and l1 difference of the composed graph
/// is at least `KINK_MARGIN` from zero.
fn chain_case(rng: &mut RandomSource) -> Check {
    let c = 1 + rng.below(3);
    let f = 2 + rng.below(3);
    let shape = [1, c, 3 + rng.below(3), 3 + rng.below(3)];
    let (inputs, t) = loop {
        let inputs = vec![
            tracked(randn(rng, shape, 1.0)),
            tracked(randn(rng, [f, c, 3, 3], 0.4)),
            tracked(randn(rng, [f, 1, 1, 1], 0.3)),
            tracked(randn(rng, [c, f, 3, 3], 0.4)),
            tracked(randn(rng, [c, 1, 1, 1], 0.3)),
            tracked(randn(rng, [4 * c, c, 1, 1], 0.5)),
            tracked(randn(rng, [4 * c, 1, 1, 1], 0.3)),
        ];
        let t = randn(rng, [1, c, 2 * shape[2], 2 * shape[3]], 1.0);
        let arrs: Vec<Arr> = inputs.iter().map(Arr::from_tensor).collect();
        let mut k = Kinks::default();
        chain_oracle(&arrs, &Arr::from_tensor(&t), &mut k);
        if k.margin > KINK_MARGIN {
            break (inputs, t);
        }
    };
    let ta = Arr::from_tensor(&t);
    let p3 = ConvParams::same(3);
    let p1 = ConvParams::same(1);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p)).collect();
    let h = tape.conv2d(vars[0], vars[1], vars[2], p3).expect("conv");
    let h = tape.relu(h);
    let h = tape.conv2d(h, vars[3], vars[4], p3).expect("conv");
    let h = tape.add(vars[0], h).expect("add");
    let h = tape.conv2d(h, vars[5], vars[6], p1).expect("conv");
    let h = tape.pixel_shuffle(h, 2).expect("shuffle");
    let tv = tape.constant(t);
    let loss = tape.l1_loss(h, tv).expect("l1");
    let analytic = grads_of(&tape, loss, &vars);
    check("chain", &inputs, &move |a: &[Arr], k: &mut Kinks| chain_oracle(a, &ta, k), &analytic)
}

/// `SHAPES_PER_OP` random cases for every differentiable op plus composed graphs.
pub fn suite(seed: u64) -> Vec<Check> {
    let cases: [(u64, fn(&mut RandomSource) -> Check); 7] = [
        (1, conv_case),
        (2, relu_case),
        (3, add_case),
        (4, shuffle_case),
        (5, l1_case),
        (6, mse_case),
        (7, chain_case),
    ];
    let mut out = Vec::new();
    for (stream, case) in cases {
        let mut rng = RandomSource::derive(seed, stream);
        out.extend((0..SHAPES_PER_OP).map(|_| case(&mut rng)));
    }
    out
}
