//! The `magtrack` command line.
//!
//! Every command is deterministic in its flags. Exit codes: 0 success,
//! 1 runtime failure, 2 usage error (including an unknown scenario).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::UnitQuaternion;

use crate::calibration::{CalibrationModel, CalibrationPair, Response};
use crate::evaluation::{align_streams, compute_errors, report_export, ErrorReport, ReportFormat, RigidTransform, AXES};
use crate::field::{dipole_field, CoilSpec};
use crate::geometry::{BoundingBox, Pose, Vec3};
use crate::io;
use crate::pipeline::{fit_pairs, pairs_from_run, track, Experiment, IncompletePolicy, TrackOptions};
use crate::positioning::{geometry_quality, DEFAULT_SMOOTHING_WINDOW};
use crate::receiver::{axis_strengths, draw_noise_db, strength_from_field, ReceiverSpec, DEFAULT_NOISE_SIGMA_DB};
use crate::scheduler::{assemble_frames, ClockModel, TdmaSchedule};
use crate::simulation::{
    builtin_scenario, calibration_sweep, generate_trajectory, simulate_run, Scenario, SimulationConfig,
    SimulationError, BUILTIN_SCENARIOS,
};

#[derive(Debug, Parser)]
#[command(name = "magtrack", version, about = "Magnetic-field hand tracking: simulate, calibrate, track, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a run (or a calibration sweep) and write its CSV files.
    Simulate(SimulateArgs),
    /// Fit per-coil strength-to-distance calibration.
    Calibrate(CalibrateArgs),
    /// Turn raw samples into a smoothed position track.
    Track(TrackArgs),
    /// Score estimates against ground truth, or run a simulated batch.
    Evaluate(EvaluateArgs),
    /// Strength versus distance along one coil's axis.
    RangeTest(RangeTestArgs),
    /// Error amplification of coil layouts over their workspaces.
    GeometryStudy(GeometryArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Builtin name or path to a scenario JSON file.
    #[arg(long, default_value = "whiteboard")]
    pub scenario: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 120.0)]
    pub duration_s: f64,
    /// Per-sample receiver noise, dB.
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA_DB)]
    pub noise_sigma: f64,
    /// Ground-truth noise, meters (defaults to the scenario's value).
    #[arg(long)]
    pub truth_noise: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub clock_offset_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drift_ppm: f64,
    #[arg(long)]
    pub resync_interval_s: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub resync_jitter_ms: f64,
    /// Write an axial calibration sweep (calibration_pairs.csv) instead of a run.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, default_value_t = 100)]
    pub pairs_per_coil: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, required_unless_present = "pairs", requires = "truth")]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Layout whose coil positions turn truth into distances.
    #[arg(long, default_value = "whiteboard")]
    pub scenario: String,
    /// Ready-made pairs (coil_id,strength,distance_m) instead of samples + truth.
    #[arg(long, conflicts_with = "samples")]
    pub pairs: Option<PathBuf>,
    /// linear or log-linear.
    #[arg(long, default_value = "log-linear")]
    pub response: Response,
    #[arg(long, default_value_t = 50.0)]
    pub tolerance_ms: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long, default_value = "whiteboard")]
    pub scenario: String,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
    pub window: usize,
    /// drop or hold-last.
    #[arg(long, default_value = "drop")]
    pub incomplete: IncompletePolicy,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "batch")]
    pub estimates: Option<PathBuf>,
    #[arg(long, required_unless_present = "batch")]
    pub truth: Option<PathBuf>,
    /// Label for the report row.
    #[arg(long, default_value = "run")]
    pub name: String,
    /// Nearest-neighbour alignment tolerance (default half a frame period).
    #[arg(long, default_value_t = 210.0)]
    pub tolerance_ms: f64,
    /// JSON rigid transform mapping estimates into the truth frame.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Calibrate and track fresh simulated runs for each --scenario.
    #[arg(long, conflicts_with_all = ["estimates", "truth"])]
    pub batch: bool,
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 420.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA_DB)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
    pub window: usize,
    /// csv or json.
    #[arg(long, default_value = "csv")]
    pub format: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RangeTestArgs {
    /// Take the coil from this layout; otherwise a default coil at the origin facing +z.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub coil: usize,
    #[arg(long, default_value_t = 0.1)]
    pub min_m: f64,
    #[arg(long, default_value_t = 2.5)]
    pub max_m: f64,
    #[arg(long, default_value_t = 0.05)]
    pub step_m: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    /// Layouts to study (default: all builtin).
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    /// Query points per workspace axis.
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

/// Writes a line to stdout; a closed pipe is not an error for a summary.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

/// Builtin name, or a JSON file path.
pub fn load_scenario(spec: &str) -> CliResult<Scenario> {
    match builtin_scenario(spec) {
        Ok(s) => Ok(s),
        Err(SimulationError::UnknownScenario(_)) if Path::new(spec).is_file() => {
            let text = fs::read_to_string(spec).map_err(|e| runtime(format!("{spec}: {e}")))?;
            Scenario::from_json(&text).map_err(runtime)
        }
        Err(e @ SimulationError::UnknownScenario(_)) => Err(CliError::Usage(e.to_string())),
        Err(e) => Err(runtime(e)),
    }
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), io::IoError>) -> CliResult<()> {
    let mut w = BufWriter::new(io::create(path).map_err(runtime)?);
    f(&mut w).map_err(runtime)?;
    w.flush().map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_with<T>(path: &Path, f: impl FnOnce(fs::File) -> Result<T, io::IoError>) -> CliResult<T> {
    let file = io::open(path).map_err(runtime)?;
    f(file).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn receiver_with_noise(sigma_db: f64) -> CliResult<ReceiverSpec> {
    let rx = ReceiverSpec {
        noise_sigma_db: sigma_db,
        ..Default::default()
    };
    rx.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(rx)
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut scenario = load_scenario(&a.scenario)?;
    if let Some(t) = a.truth_noise {
        scenario.truth_noise_sigma_m = t;
    }
    let receiver = receiver_with_noise(a.noise_sigma)?;
    let schedule = TdmaSchedule::with_coils(scenario.coils.len());
    prepare_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("scenario.json"), &(scenario.to_json() + "\n"))?;
    if a.sweep {
        let pairs = calibration_sweep(&scenario, &receiver, &schedule, a.pairs_per_coil, [0.2, 2.0], a.seed).map_err(runtime)?;
        write_file(&a.out_dir.join("calibration_pairs.csv"), |w| io::write_pairs(w, &pairs))?;
        say!(
            "scenario {}: calibration sweep, {} coils x {} stations over 0.2-2.0 m",
            scenario.name,
            scenario.coils.len(),
            a.pairs_per_coil
        );
        return Ok(());
    }
    if !(a.duration_s > 0.0) {
        return Err(CliError::Usage("--duration-s must be positive".into()));
    }
    let trajectory = generate_trajectory(&scenario, a.duration_s, a.seed).map_err(runtime)?;
    let clock = ClockModel {
        offset_ms: a.clock_offset_ms,
        drift_ppm: a.drift_ppm,
        resync_interval_ms: a.resync_interval_s.map(|s| s * 1000.0),
        jitter_ms: a.resync_jitter_ms,
        seed: a.seed,
        ..ClockModel::ideal()
    };
    let config = SimulationConfig {
        receiver,
        schedule,
        clock,
        seed: a.seed.wrapping_add(1),
        ..Default::default()
    };
    let run = simulate_run(&scenario, &trajectory, &config).map_err(runtime)?;
    write_file(&a.out_dir.join("samples.csv"), |w| io::write_samples(w, &run.samples))?;
    write_file(&a.out_dir.join("truth.csv"), |w| io::write_truth(w, &run.truth))?;
    write_file(&a.out_dir.join("truth_clean.csv"), |w| io::write_truth(w, &run.truth_clean))?;
    say!(
        "scenario {}: duration {:.1} s, {} frames ({} complete), {} samples, {} floor-saturated, {} misattributed",
        scenario.name,
        run.duration_ms / 1000.0,
        run.frames.len(),
        run.complete_frames(),
        run.samples.len(),
        run.floor_saturated,
        run.sync.misattributed_samples
    );
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let scenario = load_scenario(&a.scenario)?;
    let n = scenario.coils.len();
    let pairs = match (&a.pairs, &a.samples, &a.truth) {
        (Some(p), _, _) => {
            let mut map = std::collections::BTreeMap::<usize, Vec<CalibrationPair>>::new();
            for (c, pair) in read_with(p, io::read_pairs)? {
                map.entry(c).or_default().push(pair);
            }
            map
        }
        (None, Some(s), Some(t)) => {
            let samples = read_with(s, io::read_samples)?;
            let truth = read_with(t, io::read_truth)?;
            let schedule = TdmaSchedule::with_coils(n);
            let (frames, _) = assemble_frames(&samples, &schedule, &ClockModel::ideal()).map_err(runtime)?;
            pairs_from_run(&frames, &truth, &scenario.coil_positions(), a.tolerance_ms)
        }
        _ => return Err(CliError::Usage("need --pairs, or --samples with --truth".into())),
    };
    let model = fit_pairs(&pairs, n, a.response).map_err(runtime)?;
    prepare_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("calibration.json"), &(model.to_json() + "\n"))?;
    say!("{:>4} {:>14} {:>10} {:>8} {:>8} {:>6}", "coil", "a", "b", "rms_m", "r2", "n");
    for (coil, c) in &model.coils {
        let count = pairs.get(coil).map_or(0, Vec::len);
        say!("{coil:>4} {:>14.6e} {:>10.5} {:>8.4} {:>8.5} {count:>6}", c.a, c.b, c.rms, c.r2);
    }
    Ok(())
}

fn cmd_track(a: &TrackArgs) -> CliResult<()> {
    if a.window < 1 {
        return Err(CliError::Usage("--window must be at least 1".into()));
    }
    let scenario = load_scenario(&a.scenario)?;
    let samples = read_with(&a.samples, io::read_samples)?;
    let text = fs::read_to_string(&a.calibration).map_err(|e| runtime(format!("{}: {e}", a.calibration.display())))?;
    let model = CalibrationModel::from_json(&text).map_err(|e| runtime(format!("{}: {e}", a.calibration.display())))?;
    let schedule = TdmaSchedule::with_coils(scenario.coils.len());
    let (frames, sync) = assemble_frames(&samples, &schedule, &ClockModel::ideal()).map_err(runtime)?;
    let opts = TrackOptions {
        window: a.window,
        incomplete: a.incomplete,
        ..Default::default()
    };
    let tracked = track(&frames, &model, &scenario.beacons(), &schedule, &opts).map_err(runtime)?;
    prepare_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("estimates.csv"), |w| io::write_estimates(w, &tracked.smoothed))?;
    let failed = tracked.raw.iter().filter(|e| e.is_failed()).count();
    let outliers = tracked.raw.iter().filter(|e| e.outlier).count();
    say!(
        "{} frames, {} estimates ({} failed, {} outliers), {} dropped incomplete, {} misattributed samples",
        frames.len(),
        tracked.smoothed.len(),
        failed,
        outliers,
        tracked.dropped_frames,
        sync.misattributed_samples
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let format: ReportFormat = a.format.parse().map_err(|e: crate::evaluation::EvaluationError| CliError::Usage(e.to_string()))?;
    let reports: Vec<ErrorReport> = if a.batch {
        let names: Vec<String> = if a.scenarios.is_empty() {
            ["whiteboard", "table", "shelf", "waist_chest", "waist_v3"].iter().map(|s| s.to_string()).collect()
        } else {
            a.scenarios.clone()
        };
        let scenarios = names.iter().map(|n| load_scenario(n)).collect::<CliResult<Vec<_>>>()?;
        let experiment = Experiment {
            receiver: receiver_with_noise(a.noise_sigma)?,
            duration_s: a.duration_s,
            seed: a.seed,
            track: TrackOptions {
                window: a.window.max(1),
                ..Default::default()
            },
            ..Default::default()
        };
        scenarios
            .iter()
            .map(|s| experiment.run(s).map(|r| r.report).map_err(runtime))
            .collect::<CliResult<_>>()?
    } else {
        let (Some(e), Some(t)) = (&a.estimates, &a.truth) else {
            return Err(CliError::Usage("need --estimates and --truth, or --batch".into()));
        };
        let mut estimates = read_with(e, io::read_estimates)?;
        let truth = read_with(t, io::read_truth)?;
        if let Some(path) = &a.transform {
            let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let tf: RigidTransform = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            tf.validate().map_err(runtime)?;
            tf.apply_all(&mut estimates);
        }
        let aligned = align_streams(&estimates, &truth, a.tolerance_ms).map_err(runtime)?;
        vec![compute_errors(&aligned.pairs, &a.name).map_err(runtime)?]
    };
    prepare_dir(&a.out_dir)?;
    let path = a.out_dir.join(format!("report.{}", format.extension()));
    write_text(&path, &report_export(&reports, format))?;
    for r in &reports {
        say!("{r}");
    }
    Ok(())
}

/// Receiver held so that its three windings share the on-axis field of a
/// coil facing +z; compose with the coil's orientation for other coils.
fn tilted_receiver() -> ReceiverSpec {
    let diag = Vec3::new(1.0, 1.0, 1.0);
    ReceiverSpec {
        orientation: UnitQuaternion::rotation_between(&diag, &Vec3::z()).expect("not antiparallel"),
        ..Default::default()
    }
}

fn cmd_range_test(a: &RangeTestArgs) -> CliResult<()> {
    if !(a.min_m > 0.0 && a.max_m >= a.min_m && a.step_m > 0.0) {
        return Err(CliError::Usage("need 0 < --min-m <= --max-m and --step-m > 0".into()));
    }
    let (pose, coil) = match &a.scenario {
        Some(name) => {
            let s = load_scenario(name)?;
            let poses = s.poses();
            let pose = *poses
                .get(a.coil)
                .ok_or_else(|| CliError::Usage(format!("scenario {} has no coil {}", s.name, a.coil)))?;
            (pose, s.coil)
        }
        None => (Pose::facing(Vec3::zeros(), Vec3::z()).expect("unit normal"), CoilSpec::default()),
    };
    let tilt = tilted_receiver();
    let receiver = ReceiverSpec {
        noise_sigma_db: a.noise_sigma,
        orientation: pose.orientation * tilt.orientation,
        ..tilt
    };
    receiver.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(a.seed)
    };
    let steps = ((a.max_m - a.min_m) / a.step_m + 1e-9).floor() as usize;
    let mut out = String::from("distance_m,strength_x,strength_y,strength_z,strength\n");
    let mut at_two = None;
    let mut last_above_floor = None;
    for i in 0..=steps {
        let d = ((a.min_m + i as f64 * a.step_m) * 1e9).round() / 1e9;
        let p = pose.position + pose.normal() * d;
        let b = dipole_field(&pose, &coil, &p).map_err(runtime)?;
        let noise = [0; 3].map(|_| draw_noise_db(&mut rng, &receiver));
        let axes = axis_strengths(&b, &coil, &receiver, noise).map_err(runtime)?;
        let total = strength_from_field(&b, &coil, &receiver, draw_noise_db(&mut rng, &receiver)).map_err(runtime)?;
        out.push_str(&format!("{d},{},{},{},{total}\n", axes[0], axes[1], axes[2]));
        if total > 0 {
            last_above_floor = Some(d);
        }
        if (d - 2.0).abs() < 1e-9 {
            at_two = Some(total);
        }
    }
    prepare_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("range_test.csv"), &out)?;
    say!(
        "{} points over {}-{} m; strength at 2.0 m: {}; last point above ADC floor: {}",
        steps + 1,
        a.min_m,
        a.max_m,
        at_two.map_or("n/a".to_string(), |s| s.to_string()),
        last_above_floor.map_or("none".to_string(), |d| format!("{d} m"))
    );
    Ok(())
}

fn cmd_geometry_study(a: &GeometryArgs) -> CliResult<()> {
    if a.grid < 1 {
        return Err(CliError::Usage("--grid must be at least 1".into()));
    }
    let names: Vec<String> = if a.scenarios.is_empty() {
        BUILTIN_SCENARIOS.iter().map(|s| s.to_string()).collect()
    } else {
        a.scenarios.clone()
    };
    let mut out = String::from("layout,axis,mean,median,max,degenerate\n");
    say!("{:<12} {:>4} {:>10} {:>10} {:>10}  degenerate", "layout", "axis", "mean", "median", "max");
    for name in &names {
        let s = load_scenario(name)?;
        let region: BoundingBox = s.workspace;
        let rep = geometry_quality(&s.beacons(), &region, a.grid).map_err(runtime)?;
        for k in 0..3 {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.name, AXES[k], rep.mean[k], rep.median[k], rep.max[k], rep.degenerate
            ));
            say!(
                "{:<12} {:>4} {:>10.4} {:>10.4} {:>10.4}  {}",
                s.name, AXES[k], rep.mean[k], rep.median[k], rep.max[k], rep.degenerate
            );
        }
    }
    prepare_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("geometry_study.csv"), &out)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Track(a) => cmd_track(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::RangeTest(a) => cmd_range_test(a),
        Command::GeometryStudy(a) => cmd_geometry_study(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_scenario_is_usage_error() {
        match load_scenario("no_such_room") {
            Err(e @ CliError::Usage(_)) => assert_eq!(e.exit_code(), 2),
            other => panic!("{other:?}"),
        }
        assert!(load_scenario("table").is_ok());
    }

    #[test]
    fn tilted_receiver_sees_all_axes() {
        let rx = tilted_receiver();
        let local = rx.orientation.inverse() * Vec3::z();
        assert!(local.iter().all(|c| (c.abs() - 1.0 / 3f64.sqrt()).abs() < 1e-12), "{local:?}");
    }
}
