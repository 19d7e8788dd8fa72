use std::fmt;
use std::sync::Arc;

use super::{adapt, evaluate, no_log, train_basic, Dataset, EvalSet, PipelineError, Result, TrainConfig};
use crate::data::DegradationLevel;
use crate::net::{AdaFmNet, BasicNet, NetConfig};

pub const CSV_HEADER: &str = "start,end,psnr_adapted,psnr_baseline,distance,direction";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    EasyToHard,
    HardToEasy,
    /// Start and end level coincide.
    Same,
}

impl Direction {
    /// Lower σ and lower scale are easier.
    pub fn between(start: DegradationLevel, end: DegradationLevel) -> Self {
        if start.level < end.level {
            Direction::EasyToHard
        } else if start.level > end.level {
            Direction::HardToEasy
        } else {
            Direction::Same
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::EasyToHard => "easy->hard",
            Direction::HardToEasy => "hard->easy",
            Direction::Same => "same",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationReport {
    pub start: DegradationLevel,
    pub end: DegradationLevel,
    pub psnr_adapted: f64,
    pub psnr_scratch_baseline: f64,
    /// `|psnr_scratch_baseline − psnr_adapted|`.
    pub psnr_distance: f64,
    pub direction: Direction,
}

impl AdaptationReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{}",
            self.start.level, self.end.level, self.psnr_adapted, self.psnr_scratch_baseline, self.psnr_distance, self.direction
        )
    }
}

pub fn reports_to_csv(reports: &[AdaptationReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyConfig {
    pub net: NetConfig,
    pub adafm_kernel: usize,
    pub basic: TrainConfig,
    pub adapt: TrainConfig,
}

impl StudyConfig {
    pub fn desk(in_channels: usize) -> Self {
        StudyConfig {
            net: NetConfig::desk(in_channels),
            adafm_kernel: 1,
            basic: TrainConfig::desk_basic(),
            adapt: TrainConfig::desk_adapt(),
        }
    }
}

/// Trains each basic network and each adaptation at most once and reuses them
/// across reports. The scratch baseline for a level is its basic network.
pub struct AdaptationStudy<'d> {
    pub config: StudyConfig,
    data: &'d Dataset,
    basics: Vec<(DegradationLevel, Arc<BasicNet>)>,
    adapted: Vec<(DegradationLevel, DegradationLevel, Arc<AdaFmNet>)>,
}

impl<'d> AdaptationStudy<'d> {
    pub fn new(config: StudyConfig, data: &'d Dataset) -> Self {
        AdaptationStudy {
            config,
            data,
            basics: Vec::new(),
            adapted: Vec::new(),
        }
    }

    pub fn basic(&mut self, level: DegradationLevel) -> Result<Arc<BasicNet>> {
        if let Some((_, n)) = self.basics.iter().find(|(l, _)| *l == level) {
            return Ok(Arc::clone(n));
        }
        log::info!("training basic network at {level}");
        let (net, _) = train_basic(self.config.net, &self.config.basic, level, self.data, &mut no_log)?;
        let net = Arc::new(net);
        self.basics.push((level, Arc::clone(&net)));
        Ok(net)
    }

    pub fn adapted(&mut self, start: DegradationLevel, end: DegradationLevel) -> Result<Arc<AdaFmNet>> {
        if start.task != end.task {
            return Err(PipelineError::InvalidConfig(format!("cannot adapt {start} to {end}")));
        }
        if let Some((_, _, n)) = self.adapted.iter().find(|(s, e, _)| *s == start && *e == end) {
            return Ok(Arc::clone(n));
        }
        let base = self.basic(start)?;
        log::info!("adapting {start} -> {end}");
        let net = base.insert_adafm(self.config.adafm_kernel)?;
        let (net, _) = adapt(net, end, &self.config.adapt, self.data, &mut no_log)?;
        let net = Arc::new(net);
        self.adapted.push((start, end, Arc::clone(&net)));
        Ok(net)
    }

    pub fn report(&mut self, start: DegradationLevel, end: DegradationLevel) -> Result<AdaptationReport> {
        let ada = self.adapted(start, end)?;
        let baseline = self.basic(end)?;
        let eval = EvalSet::new(&self.data.eval, end)?;
        let psnr_adapted = evaluate(ada.as_ref(), &eval)?;
        let psnr_scratch_baseline = evaluate(baseline.as_ref(), &eval)?;
        Ok(AdaptationReport {
            start,
            end,
            psnr_adapted,
            psnr_scratch_baseline,
            psnr_distance: (psnr_scratch_baseline - psnr_adapted).abs(),
            direction: Direction::between(start, end),
        })
    }

    /// One report per pair; a failing cell does not stop the others.
    pub fn run(&mut self, pairs: &[(DegradationLevel, DegradationLevel)]) -> Vec<Result<AdaptationReport>> {
        pairs
            .iter()
            .map(|&(s, e)| {
                let r = self.report(s, e);
                if let Err(err) = &r {
                    log::warn!("study cell {s} -> {e} failed: {err}");
                }
                r
            })
            .collect()
    }
}

pub fn adaptation_study(
    pairs: &[(DegradationLevel, DegradationLevel)],
    config: StudyConfig,
    data: &Dataset,
) -> Vec<Result<AdaptationReport>> {
    AdaptationStudy::new(config, data).run(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_procedural_image;

    #[test]
    fn direction_tags() {
        let a = DegradationLevel::denoise(0.05).unwrap();
        let b = DegradationLevel::denoise(0.3).unwrap();
        assert_eq!(Direction::between(a, b), Direction::EasyToHard);
        assert_eq!(Direction::between(b, a), Direction::HardToEasy);
        assert_eq!(Direction::between(a, a).to_string(), "same");
    }

    #[test]
    fn study_reuses_baselines_and_reports_csv() {
        let data = Dataset {
            train: (0..2).map(|i| gen_procedural_image(i, 20, 20, 1).unwrap()).collect(),
            eval: vec![gen_procedural_image(50, 16, 16, 1).unwrap()],
        };
        let tcfg = TrainConfig {
            iterations: 2,
            lr: 1e-3,
            lr_decay_step: 0,
            batch: 1,
            patch: 16,
            seed: 0,
            eval_every: 2,
        };
        let cfg = StudyConfig {
            net: NetConfig {
                in_channels: 1,
                feat_channels: 4,
                num_blocks: 1,
                adafm_kernel: None,
            },
            adafm_kernel: 1,
            basic: tcfg,
            adapt: tcfg,
        };
        let lo = DegradationLevel::denoise(0.05).unwrap();
        let hi = DegradationLevel::denoise(0.2).unwrap();
        let mut study = AdaptationStudy::new(cfg, &data);
        let reports: Vec<_> = study.run(&[(lo, hi), (hi, lo)]).into_iter().map(Result::unwrap).collect();
        assert_eq!(study.basics.len(), 2);
        for r in &reports {
            assert!(r.psnr_distance >= 0.0);
            assert_eq!(r.psnr_distance, (r.psnr_scratch_baseline - r.psnr_adapted).abs());
        }
        let csv = reports_to_csv(&reports);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.next().unwrap().starts_with("0.05,0.2,"));
        assert!(lines.next().unwrap().ends_with(",hard->easy"));
        let sr = DegradationLevel::super_resolve(2.0).unwrap();
        assert!(study.report(lo, sr).is_err());
    }
}
