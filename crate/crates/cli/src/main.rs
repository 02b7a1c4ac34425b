mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use relpose::dataset::{read_dataset, write_dataset, Dataset};
use relpose::eval::{write_csv, CsvRow};
use relpose::pipeline::{run_dataset, summarize, FrameResult, PipelineConfig, RunSummary, Tier};
use relpose::sim::{simulate, GravityMode, SimConfig, TrajectorySpec};
use relpose::{Error, RobotId};

use config::Config;

#[derive(Parser, Debug)]
#[command(name = "relpose", version, about = "Relative pose estimation benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Run all estimator tiers over a dataset.
    Estimate(EstimateArgs),
    /// Sweep one axis over seeded trials and emit a CSV.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct SimFlags {
    #[arg(long)]
    robots: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,
    #[arg(long)]
    anonymous: bool,
    #[arg(long)]
    distance_dropout: Option<f64>,
    /// absent, constant or varying
    #[arg(long)]
    gravity_mode: Option<String>,
    #[arg(long)]
    imu_rate: Option<f64>,
    /// Zero measurement noise.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimFlags,
    /// Output path; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// key=value defaults, overridden by flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone)]
struct EstimatorFlags {
    #[arg(long)]
    reference: Option<u32>,
    #[arg(long)]
    window: Option<usize>,
    /// on or off
    #[arg(long)]
    gravity: Option<String>,
    #[arg(long)]
    pcm_threshold: Option<f64>,
    /// Frames excluded from the metrics.
    #[arg(long)]
    skip: Option<usize>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    est: EstimatorFlags,
    /// Per-frame estimates file.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Metrics CSV; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// robots, window, missing, outlier or anonymous
    #[arg(long)]
    axis: String,
    /// Comma-separated sweep values.
    #[arg(long)]
    points: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// PCM thresholds for the outlier axis.
    #[arg(long)]
    thresholds: Option<String>,
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    est: EstimatorFlags,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }

    fn dataset(error: anyhow::Error) -> Self {
        Failure { code: 3, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let res = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::usage)?;
            Config::parse(&text).map_err(Failure::usage)
        }
    }
}

#[derive(Debug, Clone)]
struct SimSettings {
    spec: TrajectorySpec,
    config: SimConfig,
}

fn sim_settings(f: &SimFlags, cfg: &Config) -> CliResult<SimSettings> {
    let u = Failure::usage;
    let robots = cfg.pick(f.robots, "robots", 10).map_err(u)?;
    let duration = cfg.pick(f.duration, "duration", 30.0).map_err(u)?;
    let seed = cfg.pick(f.seed, "seed", 0).map_err(u)?;
    let noiseless = f.noiseless || cfg.pick(None, "noiseless", false).map_err(u)?;
    let mut config = if noiseless { SimConfig::noiseless() } else { SimConfig::benchmark() };
    config.degradation.bearing_missing_rate = cfg.pick(f.missing_rate, "missing-rate", 0.0).map_err(u)?;
    config.degradation.bearing_outlier_rate = cfg.pick(f.outlier_rate, "outlier-rate", 0.0).map_err(u)?;
    config.degradation.anonymous = f.anonymous || cfg.pick(None, "anonymous", false).map_err(u)?;
    config.degradation.distance_dropout_rate = cfg.pick(f.distance_dropout, "distance-dropout", 0.0).map_err(u)?;
    let mode: String = cfg.pick(f.gravity_mode.clone(), "gravity-mode", "constant".to_string()).map_err(u)?;
    config.gravity = mode.parse::<GravityMode>().map_err(|e| u(anyhow!(e)))?;
    config.rates.imu = cfg.pick(f.imu_rate, "imu-rate", config.rates.imu).map_err(u)?;
    if robots < 2 {
        return Err(u(anyhow!("--robots must be at least 2")));
    }
    let spec = TrajectorySpec::new(robots, duration, seed);
    spec.validate().map_err(|e| u(anyhow!(e)))?;
    config.degradation.validate().map_err(|e| u(anyhow!(e)))?;
    if !(config.rates.imu > 0.0) {
        return Err(u(anyhow!("--imu-rate must be positive")));
    }
    Ok(SimSettings { spec, config })
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let s = sim_settings(&a.sim, &cfg)?;
    let ds = simulate(&s.spec, &s.config).context("simulation failed")?;
    let text = write_dataset(&ds);
    match &a.out {
        Some(p) => {
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            println!("seed {}", s.spec.seed);
        }
        None => {
            print!("{text}");
            eprintln!("seed {}", s.spec.seed);
        }
    }
    Ok(())
}

fn estimator_config(f: &EstimatorFlags, cfg: &Config, ds: &Dataset) -> CliResult<(PipelineConfig, usize)> {
    let u = Failure::usage;
    let reference = cfg.pick(f.reference, "reference", 0u32).map_err(u)?;
    if reference as usize >= ds.n_robots {
        return Err(u(anyhow!("reference robot {reference} is not in the dataset ({} robots)", ds.n_robots)));
    }
    let gravity: String = cfg.pick(f.gravity.clone(), "gravity", "on".to_string()).map_err(u)?;
    let gravity = match gravity.as_str() {
        "on" => true,
        "off" => false,
        other => return Err(u(anyhow!("--gravity must be on or off, got '{other}'"))),
    };
    let mut pc = PipelineConfig::new(RobotId(reference), ds.noise.estimator_weights().with_gravity(gravity));
    pc.window = cfg.pick(f.window, "window", pc.window).map_err(u)?;
    pc.prob_threshold = cfg.pick(f.pcm_threshold, "pcm-threshold", pc.prob_threshold).map_err(u)?;
    if pc.window < 2 {
        return Err(u(anyhow!("--window must be at least 2")));
    }
    if !(pc.prob_threshold > 0.0 && pc.prob_threshold < 1.0) {
        return Err(u(anyhow!("--pcm-threshold must lie in (0, 1)")));
    }
    let skip = cfg.pick(f.skip, "skip", 0).map_err(u)?;
    Ok((pc, skip))
}

fn estimates_file(results: &[FrameResult]) -> String {
    let mut out = String::from("# relpose-estimates v1\n# time tier robot px py pz qw qx qy qz\n");
    for r in results {
        for t in Tier::ALL {
            for (j, e) in r.tier(t).iter().enumerate() {
                let Some(s) = e else { continue };
                let (p, q) = (s.position, s.orientation.quaternion());
                let _ = writeln!(
                    out,
                    "{:.6} {} {j} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e}",
                    r.timestamp.secs(),
                    t.name(),
                    p.x,
                    p.y,
                    p.z,
                    q.w,
                    q.i,
                    q.j,
                    q.k
                );
            }
        }
    }
    out
}

fn metric_rows(trial: &str, axis: &str, point: &str, s: &RunSummary) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for t in Tier::ALL {
        let ts = s.tier(t);
        if let Some(a) = ts.ate {
            rows.push(CsvRow::new(trial, axis, point, t.name(), "ate_pos_m", a.position));
            rows.push(CsvRow::new(trial, axis, point, t.name(), "ate_rot_deg", a.rotation.to_degrees()));
        }
        rows.push(CsvRow::new(trial, axis, point, t.name(), "output_rate", ts.output_rate));
    }
    let c = &s.rejection;
    rows.push(CsvRow::new(trial, axis, point, "pcm", "precision", c.precision));
    rows.push(CsvRow::new(trial, axis, point, "pcm", "recall", c.recall));
    rows.push(CsvRow::new(trial, axis, point, "pcm", "f1", c.f1));
    rows.push(CsvRow::new(trial, axis, point, "all", "frame_ms_mean", s.mean_frame_time.as_secs_f64() * 1e3));
    rows.push(CsvRow::new(trial, axis, point, "all", "frame_ms_max", s.max_frame_time.as_secs_f64() * 1e3));
    rows
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let text = std::fs::read_to_string(&a.dataset)
        .with_context(|| format!("reading {}", a.dataset.display()))
        .map_err(Failure::dataset)?;
    let ds = read_dataset(&text).map_err(|e| match e {
        Error::Dataset { .. } => Failure::dataset(anyhow!("malformed dataset {}: {e}", a.dataset.display())),
        other => Failure::dataset(anyhow!(other)),
    })?;
    let (pc, skip) = estimator_config(&a.est, &cfg, &ds)?;
    let results = run_dataset(&ds, &pc).context("estimation failed")?;
    if let Some(p) = &a.out {
        std::fs::write(p, estimates_file(&results)).with_context(|| format!("writing {}", p.display()))?;
    }
    let summary = summarize(&ds, &results, pc.reference, skip);
    let csv = write_csv(&metric_rows(&ds.seed.to_string(), "none", "-", &summary));
    match &a.csv {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Robots,
    Window,
    Missing,
    Outlier,
    Anonymous,
}

impl Axis {
    fn parse(s: &str) -> Option<Axis> {
        Some(match s {
            "robots" => Axis::Robots,
            "window" => Axis::Window,
            "missing" => Axis::Missing,
            "outlier" => Axis::Outlier,
            "anonymous" => Axis::Anonymous,
            _ => return None,
        })
    }

    fn default_points(self) -> &'static str {
        match self {
            Axis::Robots => "2,4,6,8,10,12,14,16,18,20",
            Axis::Window => "2,5,10,15,20",
            Axis::Missing => "0.5,0.6,0.7,0.8,0.9,0.95",
            Axis::Outlier => "0.1,0.3,0.5,0.7,0.9",
            Axis::Anonymous => "0,1",
        }
    }
}

fn parse_list(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Failure::usage(anyhow!("bad {what} value '{x}'"))))
        .collect()
}

/// One estimator run inside a sweep.
#[derive(Debug, Clone)]
struct Job {
    point: String,
    trial: usize,
    sim: SimSettings,
    est: PipelineConfig,
    skip: usize,
}

fn worker_count() -> CliResult<Option<usize>> {
    match std::env::var("RELPOSE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::usage(anyhow!("RELPOSE_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn cmd_benchmark(a: BenchmarkArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let u = Failure::usage;
    let axis = Axis::parse(&a.axis).ok_or_else(|| u(anyhow!("unknown axis '{}'", a.axis)))?;
    let points_text: String = cfg.pick(a.points.clone(), "points", axis.default_points().to_string()).map_err(u)?;
    let points = parse_list(&points_text, "point")?;
    let trials = cfg.pick(a.trials, "trials", 5usize).map_err(u)?;
    let thresholds = if axis == Axis::Outlier {
        let t: String = cfg.pick(a.thresholds.clone(), "thresholds", "0.7,0.95,0.99".to_string()).map_err(u)?;
        parse_list(&t, "threshold")?
    } else {
        vec![]
    };
    let mut sim_flags = a.sim.clone();
    if sim_flags.duration.is_none() && cfg.get("duration").is_none() {
        sim_flags.duration = Some(10.0);
    }
    let base = sim_settings(&sim_flags, &cfg)?;

    let mut jobs = Vec::new();
    for &x in &points {
        for trial in 0..trials {
            let mut sim = base.clone();
            sim.spec.seed = base.spec.seed + trial as u64;
            let label = format!("{x}");
            let mut window = None;
            match axis {
                Axis::Robots => {
                    if x < 2.0 || x.fract() != 0.0 {
                        return Err(u(anyhow!("robot count must be an integer >= 2, got {x}")));
                    }
                    sim.spec.n_robots = x as usize;
                }
                Axis::Window => {
                    if x < 2.0 || x.fract() != 0.0 {
                        return Err(u(anyhow!("window must be an integer >= 2, got {x}")));
                    }
                    window = Some(x as usize);
                }
                Axis::Missing => sim.config.degradation.bearing_missing_rate = x,
                Axis::Outlier => sim.config.degradation.bearing_outlier_rate = x,
                Axis::Anonymous => sim.config.degradation.anonymous = x != 0.0,
            }
            sim.config.degradation.validate().map_err(|e| u(anyhow!(e)))?;
            // estimator settings only depend on the robot count and noise
            let probe = Dataset {
                n_robots: sim.spec.n_robots,
                seed: sim.spec.seed,
                noise: sim.config.noise,
                extrinsics: vec![],
                frames: vec![],
                outliers: vec![],
                imu: vec![],
                truth: vec![],
            };
            let (mut est, skip) = estimator_config(&a.est, &cfg, &probe)?;
            if let Some(w) = window {
                est.window = w;
            }
            if axis == Axis::Outlier {
                for &th in &thresholds {
                    let mut e = est.clone();
                    e.prob_threshold = th;
                    jobs.push(Job { point: format!("{x}@{th}"), trial, sim: sim.clone(), est: e, skip });
                }
            } else {
                jobs.push(Job { point: label, trial, sim, est, skip });
            }
        }
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("building worker pool")?;
    let outcomes: Vec<anyhow::Result<Vec<CsvRow>>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let ds = simulate(&job.sim.spec, &job.sim.config)?;
                let results = run_dataset(&ds, &job.est)?;
                let s = summarize(&ds, &results, job.est.reference, job.skip);
                Ok(metric_rows(&job.trial.to_string(), &a.axis, &job.point, &s))
            })
            .collect()
    });
    let mut rows = Vec::new();
    for o in outcomes {
        rows.extend(o.context("benchmark trial failed")?);
    }

    let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
    for r in &rows {
        let key = (r.point.clone(), r.tier.clone(), r.metric.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.value),
            None => groups.push((key, vec![r.value])),
        }
    }
    for ((point, tier, metric), values) in groups {
        let (m, sd) = mean_std(&values);
        rows.push(CsvRow::new("mean", &a.axis, &point, &tier, &metric, m));
        rows.push(CsvRow::new("std", &a.axis, &point, &tier, &metric, sd));
    }
    let csv = write_csv(&rows);
    match &a.out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}
