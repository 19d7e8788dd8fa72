//! Mapping degradation levels to interpolation coefficients.
//!
//! A [`ModulationCurve`] is a polynomial `λ(L) = Σ w_j L^j` pinned to `λ(L_a) = 0`
//! and `λ(L_b) = 1`. It is fitted to the best coefficients found by grid search
//! at intermediate levels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::Task;
use crate::net::AdaFmNet;
use crate::pipeline::{evaluate, EvalSet, Modulated, PipelineError};

#[derive(Debug, Error)]
pub enum ModulationError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("order {order} needs at least {needed} interior points, got {got}")]
    Underdetermined { order: usize, needed: usize, got: usize },
    #[error("duplicate level {0}")]
    DuplicateLevel(f64),
    #[error("singular system while fitting order {0}")]
    Singular(usize),
    #[error("level {0} outside the breakpoint span")]
    OutOfSpan(f64),
    #[error("malformed curve: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModulationError> = std::result::Result<T, E>;

/// Best coefficient found for one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulationPoint {
    pub level: f64,
    pub lambda: f64,
    pub psnr_at_best: f64,
}

fn grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(ModulationError::InvalidArgument(format!("grid step {step}")));
    }
    let n = (1.0 / step).round().max(1.0) as usize;
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

/// `(λ, PSNR)` for λ ∈ {0, step, …, 1}.
pub fn sweep(net: &AdaFmNet, eval: &EvalSet, step: f64) -> Result<Vec<(f64, f64)>> {
    if eval.is_empty() {
        return Err(ModulationError::InvalidArgument("empty evaluation set".into()));
    }
    grid(step)?
        .into_iter()
        .map(|lambda| Ok((lambda, evaluate(&Modulated { net, lambda }, eval)?)))
        .collect()
}

/// Grid-search argmax of PSNR over λ; ties go to the smaller λ.
pub fn best_lambda(net: &AdaFmNet, eval: &EvalSet, step: f64) -> Result<ModulationPoint> {
    let curve = sweep(net, eval, step)?;
    Ok(argmax(eval.level.level, &curve))
}

/// Picks the first maximum of a sweep.
pub fn argmax(level: f64, sweep: &[(f64, f64)]) -> ModulationPoint {
    let mut best = ModulationPoint {
        level,
        lambda: 0.0,
        psnr_at_best: f64::NEG_INFINITY,
    };
    for &(lambda, psnr) in sweep {
        if psnr > best.psnr_at_best {
            best.lambda = lambda;
            best.psnr_at_best = psnr;
        }
    }
    best
}

/// Polynomial coefficients `w_0..=w_M` for the range `[L_a, L_b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationCurve {
    pub task: Task,
    pub la: f64,
    pub lb: f64,
    pub coeffs: Vec<f64>,
}

impl ModulationCurve {
    pub fn new(task: Task, la: f64, lb: f64, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() < 2 || !la.is_finite() || !lb.is_finite() || la == lb || coeffs.iter().any(|w| !w.is_finite()) {
            return Err(ModulationError::InvalidArgument(format!(
                "curve needs a non-empty range and at least two finite coefficients, got [{la}, {lb}] and {coeffs:?}"
            )));
        }
        Ok(ModulationCurve { task, la, lb, coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Raw polynomial value, no clamping.
    pub fn evaluate(&self, level: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &w| acc * level + w)
    }

    /// `(min, max)` of the level range.
    pub fn span(&self) -> (f64, f64) {
        (self.la.min(self.lb), self.la.max(self.lb))
    }

    /// Whether λ never decreases while moving from `L_a` to `L_b` (`samples` points).
    pub fn is_monotone(&self, samples: usize) -> bool {
        let n = samples.max(2) - 1;
        let values: Vec<f64> = (0..=n)
            .map(|i| self.evaluate(self.la + (self.lb - self.la) * i as f64 / n as f64))
            .collect();
        values.windows(2).all(|w| w[1] >= w[0] - 1e-12)
    }
}

impl fmt::Display for ModulationCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w: Vec<String> = self.coeffs.iter().map(|w| w.to_string()).collect();
        write!(
            f,
            "task={} La={} Lb={} M={} w={}",
            self.task,
            self.la,
            self.lb,
            self.order(),
            w.join(",")
        )
    }
}

impl FromStr for ModulationCurve {
    type Err = ModulationError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| ModulationError::Parse(m);
        let mut fields = std::collections::BTreeMap::new();
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {tok:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        }
        let task = get("task")?.parse().map_err(|_| bad("bad task".into()))?;
        let order: usize = get("M")?.parse().map_err(|_| bad("bad M".into()))?;
        let coeffs = get("w")?
            .split(',')
            .map(|w| w.parse().map_err(|_| bad(format!("bad coefficient {w:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if coeffs.len() != order + 1 {
            return Err(bad(format!("M={order} but {} coefficients", coeffs.len())));
        }
        ModulationCurve::new(task, num("La")?, num("Lb")?, coeffs).map_err(|e| bad(e.to_string()))
    }
}

pub fn save_curve(path: impl AsRef<Path>, curve: &ModulationCurve) -> Result<()> {
    std::fs::write(path, format!("{curve}\n"))?;
    Ok(())
}

pub fn load_curve(path: impl AsRef<Path>) -> Result<ModulationCurve> {
    std::fs::read_to_string(path)?.trim().parse()
}

/// A fitted curve plus its fit diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveFit {
    pub curve: ModulationCurve,
    /// `λ_i − λ(L_i)` for each interior point, in input order.
    pub residuals: Vec<f64>,
    /// λ non-decreasing from `L_a` to `L_b` over 100 samples.
    pub monotone: bool,
}

impl CurveFit {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Order used when none is requested: linear for few points, cubic otherwise.
pub fn default_order(interior_points: usize) -> usize {
    if interior_points <= 3 {
        1
    } else {
        3
    }
}

/// Least-squares polynomial of order `m` through the interior points with
/// `λ(L_a) = 0` and `λ(L_b) = 1` enforced exactly.
///
/// The endpoint equations eliminate `w_0` and `w_1`: every remaining monomial is
/// replaced by a basis function that vanishes at both endpoints, and only its
/// coefficients are fitted.
pub fn fit_curve(task: Task, la: f64, lb: f64, interior: &[ModulationPoint], m: usize) -> Result<CurveFit> {
    if m == 0 {
        return Err(ModulationError::InvalidArgument("order must be at least 1".into()));
    }
    if !la.is_finite() || !lb.is_finite() {
        return Err(ModulationError::InvalidArgument(format!("range [{la}, {lb}]")));
    }
    if la == lb {
        return Err(ModulationError::DuplicateLevel(la));
    }
    let mut seen = vec![la, lb];
    for p in interior {
        if !p.level.is_finite() || !p.lambda.is_finite() {
            return Err(ModulationError::InvalidArgument(format!("non-finite point {p:?}")));
        }
        if seen.contains(&p.level) {
            return Err(ModulationError::DuplicateLevel(p.level));
        }
        seen.push(p.level);
    }
    let unknowns = m - 1;
    if interior.len() < unknowns {
        return Err(ModulationError::Underdetermined {
            order: m,
            needed: unknowns,
            got: interior.len(),
        });
    }

    let d = lb - la;
    let slope = |j: i32| (lb.powi(j) - la.powi(j)) / d;
    let phi = |j: i32, l: f64| l.powi(j) - la.powi(j) - slope(j) * (l - la);
    let line = |l: f64| (l - la) / d;

    let c = if unknowns == 0 {
        Vec::new()
    } else {
        let rows: Vec<Vec<f64>> = interior
            .iter()
            .map(|p| (2..=m as i32).map(|j| phi(j, p.level)).collect())
            .collect();
        let rhs: Vec<f64> = interior.iter().map(|p| p.lambda - line(p.level)).collect();
        least_squares(&rows, &rhs).ok_or(ModulationError::Singular(m))?
    };

    let mut coeffs = vec![0.0; m + 1];
    coeffs[0] = -la / d;
    coeffs[1] = 1.0 / d;
    for (i, &cj) in c.iter().enumerate() {
        let j = i as i32 + 2;
        coeffs[0] += cj * (slope(j) * la - la.powi(j));
        coeffs[1] -= cj * slope(j);
        coeffs[j as usize] = cj;
    }
    let curve = ModulationCurve::new(task, la, lb, coeffs)?;
    let residuals = interior.iter().map(|p| p.lambda - curve.evaluate(p.level)).collect();
    let monotone = curve.is_monotone(100);
    Ok(CurveFit {
        curve,
        residuals,
        monotone,
    })
}

/// Solves `min ‖A c − y‖²` through the normal equations with column scaling and
/// partially pivoted elimination. `None` when the system is singular.
fn least_squares(a: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = a.first()?.len();
    let scale: Vec<f64> = (0..n)
        .map(|j| a.iter().map(|r| r[j].abs()).fold(0.0, f64::max))
        .collect();
    if scale.iter().any(|&s| s == 0.0) {
        return None;
    }
    let mut m = vec![vec![0.0; n + 1]; n];
    for (row, &yi) in a.iter().zip(y) {
        for i in 0..n {
            let ai = row[i] / scale[i];
            for j in 0..n {
                m[i][j] += ai * row[j] / scale[j];
            }
            m[i][n] += ai * yi;
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs()))?;
        if m[piv][col].abs() < 1e-13 {
            return None;
        }
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for k in col..=n {
                m[r][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x.iter().zip(&scale).map(|(v, s)| v / s).collect())
}

/// Coefficient for `level`: clamped polynomial value, endpoint value outside the range.
pub fn predict_lambda(curve: &ModulationCurve, level: f64) -> f64 {
    let (lo, hi) = curve.span();
    if level.is_nan() {
        return 0.0;
    }
    if level <= lo || level >= hi {
        let at_a = (level - curve.la).abs() <= (level - curve.lb).abs();
        return if at_a { 0.0 } else { 1.0 };
    }
    curve.evaluate(level).clamp(0.0, 1.0)
}

/// Ordered levels, each backed by a network; neighbouring pairs form segments.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseMap<N> {
    breakpoints: Vec<(f64, N)>,
}

/// Segment endpoints and the coefficient within the segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment<'m, N> {
    pub index: usize,
    pub from: &'m N,
    pub to: &'m N,
    pub lambda: f64,
}

impl<N> PiecewiseMap<N> {
    /// Levels must be strictly increasing or strictly decreasing.
    pub fn new(breakpoints: Vec<(f64, N)>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(ModulationError::InvalidArgument("need at least two breakpoints".into()));
        }
        let levels: Vec<f64> = breakpoints.iter().map(|b| b.0).collect();
        let up = levels.windows(2).all(|w| w[0] < w[1]);
        let down = levels.windows(2).all(|w| w[0] > w[1]);
        if !up && !down {
            return Err(ModulationError::InvalidArgument(format!("levels not strictly monotone: {levels:?}")));
        }
        Ok(PiecewiseMap { breakpoints })
    }

    pub fn levels(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|b| b.0).collect()
    }

    /// `λ = (L − L_i) / (L_{i+1} − L_i)` on the segment containing `level`.
    /// A level on an inner breakpoint starts the segment to its right.
    pub fn lambda(&self, level: f64) -> Result<Segment<'_, N>> {
        let last = self.breakpoints.len() - 2;
        for i in 0..=last {
            let (l0, l1) = (self.breakpoints[i].0, self.breakpoints[i + 1].0);
            let t = (level - l0) / (l1 - l0);
            let inside = (0.0..1.0).contains(&t) || (i == last && t == 1.0);
            if inside {
                return Ok(Segment {
                    index: i,
                    from: &self.breakpoints[i].1,
                    to: &self.breakpoints[i + 1].1,
                    lambda: t,
                });
            }
        }
        Err(ModulationError::OutOfSpan(level))
    }
}
