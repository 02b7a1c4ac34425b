//! Per-frame driver running SFC, SFO, MFLO and MFTO for one reference robot.

use std::time::{Duration, Instant};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{ate_frame, ate_sequence, output_rate, pr_of_rejection, Ate, Classification};
use crate::mfre::{Mfre, MfreConfig, DEFAULT_WINDOW, MFTO_MAX_ITERATIONS};
use crate::outlier_pcm::{InlierMask, DEFAULT_PROB_THRESHOLD};
use crate::preint::Biases;
use crate::sfc::run_sfc;
use crate::sfo::run_sfo;
use crate::types::{Extrinsics, ImuSample, MeasurementFrame, NoiseConfig, RobotId, RobotState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Sfc,
    Sfo,
    Mflo,
    Mfto,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Sfc, Tier::Sfo, Tier::Mflo, Tier::Mfto];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Sfc => "sfc",
            Tier::Sfo => "sfo",
            Tier::Mflo => "mflo",
            Tier::Mfto => "mfto",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub reference: RobotId,
    /// Estimator weights; must be strictly positive.
    pub noise: NoiseConfig,
    pub prob_threshold: f64,
    pub window: usize,
    pub mfto_iterations: usize,
    pub run_mfto: bool,
}

impl PipelineConfig {
    pub fn new(reference: RobotId, noise: NoiseConfig) -> Self {
        PipelineConfig {
            reference,
            noise,
            prob_threshold: DEFAULT_PROB_THRESHOLD,
            window: DEFAULT_WINDOW,
            mfto_iterations: MFTO_MAX_ITERATIONS,
            run_mfto: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameTiming {
    pub sfc: Duration,
    pub sfo: Duration,
    pub mfre: Duration,
}

impl FrameTiming {
    pub fn total(&self) -> Duration {
        self.sfc + self.sfo + self.mfre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub timestamp: crate::types::Timestamp,
    /// Indexed by [`Tier`]; states are relative to the reference robot.
    pub estimates: [Vec<Option<RobotState>>; 4],
    pub mask: InlierMask,
    pub keyframe: bool,
    pub timing: FrameTiming,
    pub flags: Vec<String>,
}

impl FrameResult {
    pub fn tier(&self, t: Tier) -> &[Option<RobotState>] {
        &self.estimates[t.index()]
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    n: usize,
    extrinsics: Vec<Extrinsics>,
    mfre: Mfre,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, n: usize, extrinsics: Vec<Extrinsics>) -> Result<Self> {
        if cfg.reference.index() >= n {
            return Err(Error::UnknownId(cfg.reference.0));
        }
        if !(cfg.prob_threshold > 0.0 && cfg.prob_threshold < 1.0) {
            return Err(Error::InvalidInput("probability threshold must lie in (0, 1)".into()));
        }
        let mut mc = MfreConfig::new(n, cfg.reference, cfg.noise);
        mc.window = cfg.window;
        mc.extrinsics = extrinsics.clone();
        mc.biases = vec![Biases::default(); n];
        mc.mfto_iterations = cfg.mfto_iterations;
        mc.run_mfto = cfg.run_mfto;
        let mfre = Mfre::new(mc)?;
        Ok(Pipeline { cfg, n, extrinsics, mfre })
    }

    pub fn push_imu(&mut self, s: ImuSample) -> Result<()> {
        self.mfre.push_imu(s)
    }

    pub fn process(&mut self, frame: &MeasurementFrame) -> Result<FrameResult> {
        let n = self.n;
        let noise = &self.cfg.noise;
        let mut flags = Vec::new();
        let mut timing = FrameTiming::default();

        let start = Instant::now();
        let run = run_sfc(frame, n, &self.extrinsics, noise, self.cfg.reference, self.cfg.prob_threshold);
        timing.sfc = start.elapsed();
        let poses = |r: &crate::sfc::SfcResult| -> Vec<Option<RobotState>> {
            (0..n).map(|j| r.pose(j).map(|(p, q)| RobotState::new(p, nalgebra::Vector3::zeros(), q))).collect()
        };
        let (sfc, sfo, sfre) = match &run.result {
            Ok(res) => {
                let start = Instant::now();
                let out = run_sfo(frame, res, &run.mask, &self.extrinsics, noise);
                timing.sfo = start.elapsed();
                if !out.refined {
                    flags.push("sfo: not refined".into());
                }
                (poses(res), poses(&out.result), Some(out.result))
            }
            Err(e) => {
                flags.push(format!("sfc: {e}"));
                (vec![None; n], vec![None; n], None)
            }
        };

        let start = Instant::now();
        let out = self.mfre.process(frame, &run.mask, sfre.as_ref())?;
        timing.mfre = start.elapsed();
        flags.extend(out.flags);
        Ok(FrameResult {
            timestamp: frame.timestamp,
            estimates: [sfc, sfo, out.mflo, out.mfto],
            mask: run.mask,
            keyframe: out.keyframe,
            timing,
            flags,
        })
    }
}

/// Runs the whole dataset, feeding IMU samples up to each frame time.
pub fn run_dataset(ds: &Dataset, cfg: &PipelineConfig) -> Result<Vec<FrameResult>> {
    let mut p = Pipeline::new(cfg.clone(), ds.n_robots, ds.extrinsics.clone())?;
    let mut imu = ds.imu.iter().peekable();
    let mut out = Vec::with_capacity(ds.frames.len());
    for frame in &ds.frames {
        while let Some(s) = imu.next_if(|s| s.timestamp <= frame.timestamp) {
            p.push_imu(*s)?;
        }
        out.push(p.process(frame)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TierSummary {
    pub ate: Option<Ate>,
    pub output_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub tiers: [TierSummary; 4],
    pub rejection: Classification,
    pub mean_frame_time: Duration,
    pub max_frame_time: Duration,
}

impl RunSummary {
    pub fn tier(&self, t: Tier) -> &TierSummary {
        &self.tiers[t.index()]
    }
}

/// Metrics over frames from `skip` on. Output rate counts
/// (frame, non-reference robot) slots with an estimate.
pub fn summarize(ds: &Dataset, results: &[FrameResult], reference: RobotId, skip: usize) -> RunSummary {
    let mut tiers = [TierSummary::default(); 4];
    let r = reference.index();
    for t in Tier::ALL {
        let mut ates = Vec::new();
        let (mut valid, mut total) = (0usize, 0usize);
        for (f, res) in results.iter().enumerate().skip(skip) {
            let est = res.tier(t);
            valid += est.iter().enumerate().filter(|(j, e)| *j != r && e.is_some()).count();
            total += ds.n_robots - 1;
            if ds.has_truth() {
                if let Some(a) = ate_frame(&ds.truth[f], est, reference) {
                    ates.push(a);
                }
            }
        }
        tiers[t.index()] = TierSummary { ate: ate_sequence(&ates), output_rate: output_rate(valid, total).unwrap_or(0.0) };
    }
    let rejection = pr_of_rejection(
        results
            .iter()
            .zip(&ds.outliers)
            .skip(skip)
            .filter(|(res, labels)| res.mask.keep.len() == labels.len())
            .map(|(res, labels)| (res.mask.keep.as_slice(), labels.as_slice())),
    );
    let times: Vec<Duration> = results.iter().map(|r| r.timing.total()).collect();
    let mean_frame_time = if times.is_empty() { Duration::ZERO } else { times.iter().sum::<Duration>() / times.len() as u32 };
    let max_frame_time = times.iter().copied().max().unwrap_or_default();
    RunSummary { tiers, rejection, mean_frame_time, max_frame_time }
}
