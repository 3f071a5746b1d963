//! Glue between the stages: frames to distances to positions, calibration
//! from recorded runs, and a calibrate-then-track experiment driver.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, CalibrationModel, CalibrationPair, Response};
use crate::evaluation::{align_streams, compute_errors, ErrorReport, EvaluationError};
use crate::geometry::Vec3;
use crate::positioning::{
    smooth_trajectory, BeaconSet, DistanceVector, PositionEstimate, PositioningError, SolverOptions, StreamSolver,
    DEFAULT_SMOOTHING_WINDOW,
};
use crate::receiver::ReceiverSpec;
use crate::scheduler::{Frame, TdmaSchedule};
use crate::simulation::{
    generate_trajectory_with, simulate_run, Scenario, SimulationConfig, SimulationError, TrajectoryConfig, TruthSample,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Positioning(#[from] PositioningError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("coil {coil}: fewer than 2 distinct strengths in the calibration data")]
    InsufficientCoverage { coil: usize },
    #[error("frames carry {frames} coils but the layout has {layout}")]
    CoilCountMismatch { frames: usize, layout: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncompletePolicy {
    #[default]
    Drop,
    /// Reuse each missing coil's most recent strength.
    HoldLast,
}

impl std::str::FromStr for IncompletePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop" => Ok(Self::Drop),
            "hold-last" => Ok(Self::HoldLast),
            other => Err(format!("unknown incomplete-frame policy '{other}' (expected drop or hold-last)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOptions {
    pub window: usize,
    pub incomplete: IncompletePolicy,
    pub solver: SolverOptions,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_SMOOTHING_WINDOW,
            incomplete: IncompletePolicy::Drop,
            solver: SolverOptions::default(),
        }
    }
}

/// Mean acquisition time of the samples behind a frame; the cycle midpoint
/// if the frame is empty.
pub fn frame_time_ms(frame: &Frame, schedule: &TdmaSchedule) -> f64 {
    let times: Vec<f64> = frame.sample_times_ms.iter().flatten().copied().collect();
    if times.is_empty() {
        frame.timestamp_ms + 0.5 * schedule.cycle_ms()
    } else {
        times.iter().sum::<f64>() / times.len() as f64
    }
}

/// Distance vectors for every usable frame, stamped with [`frame_time_ms`].
pub fn frames_to_distances(
    frames: &[Frame],
    model: &CalibrationModel,
    schedule: &TdmaSchedule,
    policy: IncompletePolicy,
) -> Result<Vec<DistanceVector>, PipelineError> {
    model.check_covers(schedule.n_coils)?;
    let mut last: Vec<Option<f64>> = vec![None; schedule.n_coils];
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        if frame.n_coils() != schedule.n_coils {
            return Err(PipelineError::CoilCountMismatch {
                frames: frame.n_coils(),
                layout: schedule.n_coils,
            });
        }
        for (slot, s) in last.iter_mut().zip(&frame.strengths) {
            if s.is_some() {
                *slot = *s;
            }
        }
        let strengths: Vec<f64> = if frame.is_complete() {
            frame.strengths.iter().map(|s| s.expect("complete frame")).collect()
        } else {
            match policy {
                IncompletePolicy::Drop => continue,
                IncompletePolicy::HoldLast => match last.iter().copied().collect::<Option<Vec<f64>>>() {
                    Some(v) => v,
                    None => continue,
                },
            }
        };
        let mut distances = Vec::with_capacity(strengths.len());
        for (coil, s) in strengths.into_iter().enumerate() {
            distances.push(model.get(coil)?.distance(s));
        }
        out.push(DistanceVector::all_valid(frame_time_ms(frame, schedule), distances));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Tracked {
    pub raw: Vec<PositionEstimate>,
    pub smoothed: Vec<PositionEstimate>,
    /// Frames skipped under the incomplete-frame policy.
    pub dropped_frames: usize,
}

pub fn track(
    frames: &[Frame],
    model: &CalibrationModel,
    beacons: &BeaconSet,
    schedule: &TdmaSchedule,
    opts: &TrackOptions,
) -> Result<Tracked, PipelineError> {
    if beacons.len() != schedule.n_coils {
        return Err(PipelineError::CoilCountMismatch {
            frames: schedule.n_coils,
            layout: beacons.len(),
        });
    }
    let vectors = frames_to_distances(frames, model, schedule, opts.incomplete)?;
    let mut solver = StreamSolver::new(beacons.clone(), opts.solver);
    let raw: Vec<PositionEstimate> = vectors.iter().map(|v| solver.solve(v)).collect();
    let smoothed = smooth_trajectory(&raw, opts.window)?;
    Ok(Tracked {
        dropped_frames: frames.len() - vectors.len(),
        raw,
        smoothed,
    })
}

fn nearest_truth(truth: &[TruthSample], t_ms: f64, tolerance_ms: f64) -> Option<Vec3> {
    let i = truth.partition_point(|s| s.timestamp_ms < t_ms);
    [i.checked_sub(1), (i < truth.len()).then_some(i)]
        .into_iter()
        .flatten()
        .map(|j| &truth[j])
        .filter(|s| (s.timestamp_ms - t_ms).abs() <= tolerance_ms)
        .min_by(|a, b| (a.timestamp_ms - t_ms).abs().total_cmp(&(b.timestamp_ms - t_ms).abs()))
        .map(|s| s.position)
}

/// Pairs each per-coil frame strength with the reference distance from the
/// truth sample nearest to that coil's mean acquisition time.
pub fn pairs_from_run(
    frames: &[Frame],
    truth: &[TruthSample],
    coil_positions: &[Vec3],
    tolerance_ms: f64,
) -> BTreeMap<usize, Vec<CalibrationPair>> {
    let mut out: BTreeMap<usize, Vec<CalibrationPair>> = (0..coil_positions.len()).map(|c| (c, Vec::new())).collect();
    for frame in frames {
        for (coil, (s, t)) in frame.strengths.iter().zip(&frame.sample_times_ms).enumerate() {
            let (Some(s), Some(t), Some(c)) = (s, t, coil_positions.get(coil)) else {
                continue;
            };
            if let Some(p) = nearest_truth(truth, *t, tolerance_ms) {
                let d = (p - c).norm();
                if d > 0.0 {
                    out.entry(coil).or_default().push(CalibrationPair {
                        strength: *s,
                        distance_m: d,
                    });
                }
            }
        }
    }
    out
}

/// Fits every coil, naming the first one without two distinct strengths.
pub fn fit_pairs(pairs: &BTreeMap<usize, Vec<CalibrationPair>>, n_coils: usize, response: Response) -> Result<CalibrationModel, PipelineError> {
    for coil in 0..n_coils {
        let p = pairs.get(&coil).map(Vec::as_slice).unwrap_or(&[]);
        let distinct = p.iter().any(|q| q.strength != p[0].strength);
        if !distinct {
            return Err(PipelineError::InsufficientCoverage { coil });
        }
    }
    Ok(CalibrationModel::fit(pairs, response)?)
}

pub fn calibrate_from_run(
    frames: &[Frame],
    truth: &[TruthSample],
    scenario: &Scenario,
    response: Response,
) -> Result<CalibrationModel, PipelineError> {
    let pairs = pairs_from_run(frames, truth, &scenario.coil_positions(), 50.0);
    fit_pairs(&pairs, scenario.coils.len(), response)
}

/// Mean absolute distance error over all coils of all complete frames.
pub fn distance_mae(frames: &[Frame], truth: &[TruthSample], scenario: &Scenario, model: &CalibrationModel) -> Option<f64> {
    let coils = scenario.coil_positions();
    let (mut sum, mut n) = (0.0, 0usize);
    for frame in frames.iter().filter(|f| f.is_complete()) {
        for (coil, (s, t)) in frame.strengths.iter().zip(&frame.sample_times_ms).enumerate() {
            let (Some(s), Some(t)) = (s, t) else { continue };
            let (Some(p), Ok(cal)) = (nearest_truth(truth, *t, 50.0), model.get(coil)) else {
                continue;
            };
            sum += (cal.distance(*s) - (p - coils[coil]).norm()).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Calibrate on one simulated run, then track and score an independent one.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub receiver: ReceiverSpec,
    pub schedule: TdmaSchedule,
    pub response: Response,
    pub track: TrackOptions,
    pub trajectory: TrajectoryConfig,
    pub calibration_duration_s: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Calibrate against the noisy reference rather than the clean one.
    pub calibrate_on_noisy_truth: bool,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            receiver: ReceiverSpec::default(),
            schedule: TdmaSchedule::default(),
            response: Response::default(),
            track: TrackOptions::default(),
            trajectory: TrajectoryConfig::default(),
            calibration_duration_s: 120.0,
            duration_s: 420.0,
            seed: 1,
            calibrate_on_noisy_truth: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: CalibrationModel,
    pub tracked: Tracked,
    /// Smoothed estimates scored against the clean trajectory.
    pub report: ErrorReport,
    pub distance_mae_m: f64,
    pub frames: usize,
}

impl Experiment {
    pub fn run(&self, scenario: &Scenario) -> Result<ExperimentResult, PipelineError> {
        let schedule = TdmaSchedule {
            n_coils: scenario.coils.len(),
            ..self.schedule
        };
        let sim = |duration_s: f64, seed: u64| -> Result<_, PipelineError> {
            let traj = generate_trajectory_with(&scenario.workspace, duration_s, seed, &self.trajectory)?;
            let cfg = SimulationConfig {
                receiver: self.receiver,
                schedule,
                seed: seed.wrapping_add(1),
                ..Default::default()
            };
            Ok(simulate_run(scenario, &traj, &cfg)?)
        };
        let cal_seed = self.seed.wrapping_mul(2).wrapping_add(1_000_003);
        let cal_run = sim(self.calibration_duration_s, cal_seed)?;
        let cal_truth = if self.calibrate_on_noisy_truth {
            &cal_run.truth
        } else {
            &cal_run.truth_clean
        };
        let model = calibrate_from_run(&cal_run.frames, cal_truth, scenario, self.response)?;

        let run = sim(self.duration_s, self.seed.wrapping_mul(2))?;
        let tracked = track(&run.frames, &model, &scenario.beacons(), &schedule, &self.track)?;
        let aligned = align_streams(&tracked.smoothed, &run.truth_clean, 0.5 * schedule.cycle_ms())?;
        let report = compute_errors(&aligned.pairs, &scenario.name)?;
        let distance_mae_m = distance_mae(&run.frames, &run.truth_clean, scenario, &model).unwrap_or(f64::NAN);
        Ok(ExperimentResult {
            model,
            frames: tracked.raw.len(),
            tracked,
            report,
            distance_mae_m,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CoilCalibration;
    use crate::simulation::{builtin_scenario, generate_trajectory, Trajectory};

    #[test]
    fn frame_time_is_mean_sample_time() {
        let s = TdmaSchedule::default();
        let f = Frame {
            cycle: 1,
            timestamp_ms: 420.0,
            strengths: vec![Some(1.0); 6],
            sample_counts: vec![5; 6],
            sample_times_ms: (0..6).map(|k| Some(420.0 + 70.0 * k as f64 + 24.0)).collect(),
            misattributed: 0,
        };
        assert!((frame_time_ms(&f, &s) - (420.0 + 175.0 + 24.0)).abs() < 1e-9);
        let empty = Frame {
            strengths: vec![None; 6],
            sample_times_ms: vec![None; 6],
            ..f
        };
        assert_eq!(frame_time_ms(&empty, &s), 630.0);
    }

    #[test]
    fn incomplete_policies() {
        let s = TdmaSchedule::default();
        let model = CalibrationModel {
            coils: (0..6).map(|c| (c, CoilCalibration::linear(-1e-4, 2.0))).collect(),
        };
        let full = Frame {
            cycle: 0,
            timestamp_ms: 0.0,
            strengths: vec![Some(10_000.0); 6],
            sample_counts: vec![5; 6],
            sample_times_ms: vec![Some(100.0); 6],
            misattributed: 0,
        };
        let mut partial = full.clone();
        partial.cycle = 1;
        partial.strengths[2] = None;
        partial.strengths[0] = Some(5_000.0);
        let frames = vec![full, partial];
        let dropped = frames_to_distances(&frames, &model, &s, IncompletePolicy::Drop).unwrap();
        assert_eq!(dropped.len(), 1);
        let held = frames_to_distances(&frames, &model, &s, IncompletePolicy::HoldLast).unwrap();
        assert_eq!(held.len(), 2);
        assert!((held[1].distances[2] - 1.0).abs() < 1e-12);
        assert!((held[1].distances[0] - 1.5).abs() < 1e-12);
        assert_eq!("hold-last".parse::<IncompletePolicy>().unwrap(), IncompletePolicy::HoldLast);
    }

    #[test]
    fn coverage_error_names_coil() {
        let mut pairs: BTreeMap<usize, Vec<CalibrationPair>> = BTreeMap::new();
        for c in 0..4 {
            pairs.insert(
                c,
                (0..5)
                    .map(|i| CalibrationPair {
                        strength: if c == 2 { 7.0 } else { i as f64 },
                        distance_m: 1.0 + i as f64,
                    })
                    .collect(),
            );
        }
        match fit_pairs(&pairs, 4, Response::Linear) {
            Err(PipelineError::InsufficientCoverage { coil }) => assert_eq!(coil, 2),
            other => panic!("{other:?}"),
        }
        pairs.remove(&3);
        assert!(matches!(fit_pairs(&pairs, 4, Response::Linear), Err(PipelineError::InsufficientCoverage { coil: 2 })));
    }

    #[test]
    fn static_noise_free_track_is_constant() {
        let scenario = builtin_scenario("whiteboard").unwrap();
        let rx = ReceiverSpec::default().noiseless();
        let schedule = TdmaSchedule::default();
        let cal_traj = generate_trajectory(&scenario, 120.0, 5).unwrap();
        let cfg = SimulationConfig {
            receiver: rx,
            ..Default::default()
        };
        let cal = simulate_run(&scenario, &cal_traj, &cfg).unwrap();
        let model = calibrate_from_run(&cal.frames, &cal.truth_clean, &scenario, Response::LogLinear).unwrap();
        let p = Vec3::new(0.8, 0.5, 1.4);
        let run = simulate_run(&scenario, &Trajectory::stationary(p, 10_000.0), &cfg).unwrap();
        let out = track(&run.frames, &model, &scenario.beacons(), &schedule, &TrackOptions::default()).unwrap();
        assert!(out.raw.len() >= 23);
        let first = out.raw[0].position;
        assert!(out.raw.iter().all(|e| (e.position - first).norm() < 1e-6));
    }
}
