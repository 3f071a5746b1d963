//! Deployment scenarios, synthetic hand trajectories and end-to-end runs.
//!
//! Coil coordinates for the builtin layouts are fixed defaults. Off-body
//! layouts keep nearest-neighbour spacing between 1.0 and 1.8 m; on-body
//! layouts sit on a static torso centred on the world `z` axis with the hand
//! working in front of it (`+y`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationPair;
use crate::field::{dipole_field, CoilSpec, FieldError};
use crate::geometry::{BoundingBox, Pose, Vec3};
use crate::positioning::BeaconSet;
use crate::receiver::{draw_noise_db, strength_from_field, RawSample, ReceiverError, ReceiverSpec};
use crate::scheduler::{assemble_frames, ClockModel, Frame, ScheduleError, SyncDiagnostics, TdmaSchedule};

pub const DEFAULT_TRUTH_NOISE_M: f64 = 0.02;
/// How long the receiver rests at each calibration station.
pub const SWEEP_DWELL_MS: f64 = 1000.0;
pub const DEFAULT_TRUTH_RATE_HZ: f64 = 100.0;
pub const BUILTIN_SCENARIOS: [&str; 6] = ["whiteboard", "table", "shelf", "waist_chest", "waist_v1", "waist_v3"];

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("unknown scenario '{0}' (expected one of whiteboard, table, shelf, waist_chest, waist_v1, waist_v3)")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("scenario has {scenario} coils but schedule has {schedule}")]
    CoilCountMismatch { scenario: usize, schedule: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Receiver(#[from] ReceiverError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoilPlacement {
    pub id: usize,
    pub position: [f64; 3],
    /// Coil axis; need not be normalized.
    pub normal: [f64; 3],
}

impl CoilPlacement {
    pub fn pose(&self) -> Option<Pose> {
        Pose::facing(Vec3::from(self.position), Vec3::from(self.normal))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub coils: Vec<CoilPlacement>,
    #[serde(default)]
    pub coil: CoilSpec,
    pub workspace: BoundingBox,
    #[serde(default = "default_truth_noise")]
    pub truth_noise_sigma_m: f64,
}

fn default_truth_noise() -> f64 {
    DEFAULT_TRUTH_NOISE_M
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidScenario(format!("{}: {m}", self.name)));
        if self.coils.len() < 4 {
            return bad("at least 4 coils are needed");
        }
        if !self.workspace.is_valid() {
            return bad("empty workspace");
        }
        if !(self.truth_noise_sigma_m >= 0.0) {
            return bad("truth noise sigma must be non-negative");
        }
        for (i, c) in self.coils.iter().enumerate() {
            if c.id != i {
                return bad("coil ids must be 0..n in order");
            }
            if c.pose().is_none() || !c.position.iter().all(|x| x.is_finite()) {
                return bad("coil pose not finite or zero normal");
            }
        }
        self.coil.validate()?;
        Ok(())
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.coils
            .iter()
            .map(|c| c.pose().expect("validated scenario has valid poses"))
            .collect()
    }

    pub fn coil_positions(&self) -> Vec<Vec3> {
        self.coils.iter().map(|c| Vec3::from(c.position)).collect()
    }

    pub fn beacons(&self) -> BeaconSet {
        BeaconSet::new(self.coils.iter().map(|c| (c.id, Vec3::from(c.position))).collect())
            .expect("validated scenario has finite coil positions")
    }

    /// Distance from each coil to its nearest neighbour.
    pub fn nearest_neighbour_spacing(&self) -> Vec<f64> {
        let p = self.coil_positions();
        (0..p.len())
            .map(|i| {
                (0..p.len())
                    .filter(|&j| j != i)
                    .map(|j| (p[i] - p[j]).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimulationError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimulationError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

fn placement(id: usize, position: [f64; 3], normal: [f64; 3]) -> CoilPlacement {
    CoilPlacement { id, position, normal }
}

/// Six coils on the front half of a waist ring of radius `r`, 30° apart,
/// alternately raised and lowered by 2 cm, axes pointing outward.
fn waist_ring(r: f64) -> Vec<CoilPlacement> {
    (0..6)
        .map(|i| {
            let th = (15.0 + 30.0 * i as f64).to_radians();
            let dz = if i % 2 == 0 { -0.02 } else { 0.02 };
            placement(i, [r * th.cos(), r * th.sin(), 1.0 + dz], [th.cos(), th.sin(), 0.0])
        })
        .collect()
}

pub fn builtin_scenario(name: &str) -> Result<Scenario, SimulationError> {
    let (coils, workspace) = match name {
        "whiteboard" => (
            vec![
                placement(0, [0.2, 0.0, 0.9], [0.0, 1.0, 0.0]),
                placement(1, [1.4, 0.0, 0.9], [0.0, 1.0, 0.0]),
                placement(2, [0.2, 0.0, 2.0], [0.0, 1.0, 0.0]),
                placement(3, [1.4, 0.0, 2.0], [0.0, 1.0, 0.0]),
                placement(4, [-0.6, 1.0, 1.4], [1.0, 0.0, 0.0]),
                placement(5, [2.2, 1.0, 1.4], [-1.0, 0.0, 0.0]),
            ],
            BoundingBox::new([0.0, 0.2, 0.9], [1.6, 0.9, 1.9]),
        ),
        "table" => (
            vec![
                placement(0, [0.0, 0.0, 0.75], [0.0, 0.0, 1.0]),
                placement(1, [1.4, 0.0, 0.75], [0.0, 0.0, 1.0]),
                placement(2, [0.0, 1.2, 0.75], [0.0, 0.0, 1.0]),
                placement(3, [1.4, 1.2, 0.75], [0.0, 0.0, 1.0]),
                placement(4, [0.7, -0.4, 1.6], [0.0, 1.0, 0.0]),
                placement(5, [0.7, 1.6, 1.6], [0.0, -1.0, 0.0]),
            ],
            BoundingBox::new([0.1, 0.1, 0.85], [1.3, 1.1, 1.5]),
        ),
        "shelf" => (
            vec![
                placement(0, [0.0, 0.0, 0.5], [0.0, 1.0, 0.0]),
                placement(1, [1.2, 0.0, 0.5], [0.0, 1.0, 0.0]),
                placement(2, [0.0, 0.0, 1.7], [0.0, 1.0, 0.0]),
                placement(3, [1.2, 0.0, 1.7], [0.0, 1.0, 0.0]),
                placement(4, [0.0, 1.2, 0.75], [0.0, 0.0, 1.0]),
                placement(5, [1.2, 1.2, 0.75], [0.0, 0.0, 1.0]),
            ],
            BoundingBox::new([0.1, -0.2, 0.6], [1.1, 0.9, 1.6]),
        ),
        "waist_chest" => {
            let tilt = 15f64.to_radians();
            let mut coils = Vec::new();
            for (row, z) in [1.0, 1.17].into_iter().enumerate() {
                for (k, x) in [-0.14, 0.0, 0.14].into_iter().enumerate() {
                    let side = k as f64 - 1.0;
                    let y = if k == 1 { 0.0 } else { -0.03 };
                    coils.push(placement(3 * row + k, [x, y, z], [side * tilt.sin(), tilt.cos(), 0.0]));
                }
            }
            (coils, BoundingBox::new([-0.4, 0.25, 0.9], [0.4, 0.6, 1.5]))
        }
        "waist_v1" => (waist_ring(0.35), BoundingBox::new([-0.4, 0.45, 0.9], [0.4, 0.75, 1.5])),
        "waist_v3" => (waist_ring(0.25), BoundingBox::new([-0.4, 0.35, 0.9], [0.4, 0.65, 1.5])),
        other => return Err(SimulationError::UnknownScenario(other.to_string())),
    };
    let scenario = Scenario {
        name: name.to_string(),
        coils,
        coil: CoilSpec::default(),
        workspace,
        truth_noise_sigma_m: DEFAULT_TRUTH_NOISE_M,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Piecewise trajectory through keyframes with smoothstep easing, so the
/// velocity vanishes at every keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(time_ms, position)`, strictly increasing in time.
    keyframes: Vec<(f64, Vec3)>,
    pub seed: u64,
}

impl Trajectory {
    pub fn from_keyframes(keyframes: Vec<(f64, Vec3)>, seed: u64) -> Result<Self, SimulationError> {
        if keyframes.is_empty() {
            return Err(SimulationError::InvalidParameter("trajectory needs a keyframe".into()));
        }
        if keyframes.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(SimulationError::InvalidParameter("keyframe times must increase".into()));
        }
        if keyframes.iter().any(|(t, p)| !t.is_finite() || !p.iter().all(|c| c.is_finite())) {
            return Err(SimulationError::InvalidParameter("keyframe not finite".into()));
        }
        Ok(Self { keyframes, seed })
    }

    pub fn stationary(position: Vec3, duration_ms: f64) -> Self {
        Self {
            keyframes: vec![(0.0, position), (duration_ms.max(1.0), position)],
            seed: 0,
        }
    }

    pub fn keyframes(&self) -> &[(f64, Vec3)] {
        &self.keyframes
    }

    pub fn start_ms(&self) -> f64 {
        self.keyframes[0].0
    }

    pub fn end_ms(&self) -> f64 {
        self.keyframes[self.keyframes.len() - 1].0
    }

    fn segment(&self, t_ms: f64) -> Option<usize> {
        if self.keyframes.len() < 2 || t_ms <= self.start_ms() || t_ms >= self.end_ms() {
            return None;
        }
        Some(self.keyframes.partition_point(|k| k.0 <= t_ms) - 1)
    }

    /// Held at the end keyframes outside the covered span.
    pub fn position_at(&self, t_ms: f64) -> Vec3 {
        match self.segment(t_ms) {
            Some(i) => {
                let (t0, p0) = self.keyframes[i];
                let (t1, p1) = self.keyframes[i + 1];
                let u = (t_ms - t0) / (t1 - t0);
                p0 + (p1 - p0) * (u * u * (3.0 - 2.0 * u))
            }
            None if t_ms <= self.start_ms() => self.keyframes[0].1,
            None => self.keyframes[self.keyframes.len() - 1].1,
        }
    }

    /// Velocity in m/s.
    pub fn velocity_at(&self, t_ms: f64) -> Vec3 {
        match self.segment(t_ms) {
            Some(i) => {
                let (t0, p0) = self.keyframes[i];
                let (t1, p1) = self.keyframes[i + 1];
                let dt_s = (t1 - t0) / 1000.0;
                let u = (t_ms - t0) / (t1 - t0);
                (p1 - p0) * (6.0 * u * (1.0 - u) / dt_s)
            }
            None => Vec3::zeros(),
        }
    }

    /// Exact peak speed (1.5 times the mean speed of the fastest segment).
    pub fn max_speed(&self) -> f64 {
        self.keyframes
            .windows(2)
            .map(|w| 1.5 * (w[1].1 - w[0].1).norm() / ((w[1].0 - w[0].0) / 1000.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub max_speed_mps: f64,
    /// Range of the mean speed drawn for each waypoint-to-waypoint move.
    pub mean_speed_mps: [f64; 2],
    /// Longest pause at a waypoint, seconds.
    pub max_dwell_s: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            max_speed_mps: 1.5,
            mean_speed_mps: [0.15, 0.45],
            max_dwell_s: 0.8,
        }
    }
}

pub fn generate_trajectory(scenario: &Scenario, duration_s: f64, seed: u64) -> Result<Trajectory, SimulationError> {
    generate_trajectory_with(&scenario.workspace, duration_s, seed, &TrajectoryConfig::default())
}

/// Random waypoints drawn uniformly in `workspace`, joined by eased moves
/// with random pauses. Every point is a convex combination of two waypoints,
/// so the path never leaves the box.
pub fn generate_trajectory_with(
    workspace: &BoundingBox,
    duration_s: f64,
    seed: u64,
    config: &TrajectoryConfig,
) -> Result<Trajectory, SimulationError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(SimulationError::InvalidParameter("duration must be positive".into()));
    }
    let [v_lo, v_hi] = config.mean_speed_mps;
    if !(v_lo > 0.0 && v_hi >= v_lo && config.max_speed_mps > 0.0 && config.max_dwell_s >= 0.0) {
        return Err(SimulationError::InvalidParameter("invalid trajectory speeds".into()));
    }
    if !workspace.is_valid() {
        return Err(SimulationError::InvalidParameter("invalid workspace".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = workspace.lerp([rng.random(), rng.random(), rng.random()]);
    let end_ms = duration_s * 1000.0;
    let mut t = 0.0;
    let mut keyframes = vec![(t, p)];
    while t < end_ms {
        let dwell = rng.random_range(0.0..=config.max_dwell_s) * 1000.0;
        if dwell > 1.0 {
            t += dwell;
            keyframes.push((t, p));
        }
        let q = workspace.lerp([rng.random(), rng.random(), rng.random()]);
        let len = (q - p).norm();
        let mean = if v_hi > v_lo { rng.random_range(v_lo..v_hi) } else { v_lo };
        let dt_s = (len / mean).max(1.5 * len / config.max_speed_mps).max(0.05);
        t += dt_s * 1000.0;
        keyframes.push((t, q));
        p = q;
    }
    Trajectory::from_keyframes(keyframes, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub timestamp_ms: f64,
    pub position: Vec3,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub receiver: ReceiverSpec,
    pub schedule: TdmaSchedule,
    /// True receiver clock relative to the transmitters.
    pub clock: ClockModel,
    /// Clock model the receiver assumes when assembling frames.
    pub assumed_clock: ClockModel,
    pub truth_rate_hz: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            receiver: ReceiverSpec::default(),
            schedule: TdmaSchedule::default(),
            clock: ClockModel::ideal(),
            assumed_clock: ClockModel::ideal(),
            truth_rate_hz: DEFAULT_TRUTH_RATE_HZ,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub samples: Vec<RawSample>,
    pub frames: Vec<Frame>,
    pub sync: SyncDiagnostics,
    /// Ultrasound-like reference, noisy.
    pub truth: Vec<TruthSample>,
    pub truth_clean: Vec<TruthSample>,
    /// Samples taken while a coil was driven that read the ADC floor.
    pub floor_saturated: usize,
    pub duration_ms: f64,
}

impl SimulatedRun {
    pub fn complete_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.is_complete()).count()
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the acquisition chain over the trajectory's span.
///
/// ADC ticks are regular in receiver time. Each tick is mapped to true time
/// to pick the driven coil and the receiver position, then digitized with
/// fresh noise.
pub fn simulate_run(
    scenario: &Scenario,
    trajectory: &Trajectory,
    config: &SimulationConfig,
) -> Result<SimulatedRun, SimulationError> {
    scenario.validate()?;
    config.receiver.validate()?;
    config.schedule.validate()?;
    if scenario.coils.len() != config.schedule.n_coils {
        return Err(SimulationError::CoilCountMismatch {
            scenario: scenario.coils.len(),
            schedule: config.schedule.n_coils,
        });
    }
    if !(config.truth_rate_hz > 0.0) {
        return Err(SimulationError::InvalidParameter("truth rate must be positive".into()));
    }
    let poses = scenario.poses();
    let start = trajectory.start_ms();
    let duration_ms = trajectory.end_ms() - start;
    let mut noise_rng = sub_rng(config.seed, 1);
    let mut truth_rng = sub_rng(config.seed, 2);

    let period = config.schedule.adc_period_ms();
    let mut samples = Vec::new();
    let mut floor_saturated = 0;
    for k in 0u64.. {
        let rx = k as f64 * period;
        if rx > duration_ms {
            break;
        }
        let t = config.clock.to_transmitter(rx);
        let coil = config.schedule.active_coil_at(t);
        let noise_db = draw_noise_db(&mut noise_rng, &config.receiver);
        let strength = match coil {
            Some(c) => {
                let p = trajectory.position_at(start + t);
                let b = dipole_field(&poses[c], &scenario.coil, &p)?;
                let s = strength_from_field(&b, &scenario.coil, &config.receiver, noise_db)?;
                if s == 0 {
                    floor_saturated += 1;
                }
                s
            }
            None => 0,
        };
        samples.push(RawSample {
            timestamp_ms: rx,
            coil_id: coil,
            strength,
        });
    }
    let (frames, sync) = assemble_frames(&samples, &config.schedule, &config.assumed_clock)?;

    let truth_period = 1000.0 / config.truth_rate_hz;
    let sigma = scenario.truth_noise_sigma_m;
    let gauss = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut truth = Vec::new();
    let mut truth_clean = Vec::new();
    for j in 0u64.. {
        let t = j as f64 * truth_period;
        if t > duration_ms {
            break;
        }
        let p = trajectory.position_at(start + t);
        let noise = if sigma > 0.0 {
            Vec3::new(gauss.sample(&mut truth_rng), gauss.sample(&mut truth_rng), gauss.sample(&mut truth_rng))
        } else {
            Vec3::zeros()
        };
        truth_clean.push(TruthSample {
            timestamp_ms: t,
            position: p,
        });
        truth.push(TruthSample {
            timestamp_ms: t,
            position: p + noise,
        });
    }
    Ok(SimulatedRun {
        samples,
        frames,
        sync,
        truth,
        truth_clean,
        floor_saturated,
        duration_ms,
    })
}

/// Axial calibration sweep: for every coil, `per_coil` stations evenly spaced
/// from `range_m[0]` to `range_m[1]` along its axis. Each station contributes
/// the mean of its steady-state samples over a [`SWEEP_DWELL_MS`] hold, with
/// fresh noise per sample.
pub fn calibration_sweep(
    scenario: &Scenario,
    receiver: &ReceiverSpec,
    schedule: &TdmaSchedule,
    per_coil: usize,
    range_m: [f64; 2],
    seed: u64,
) -> Result<Vec<(usize, CalibrationPair)>, SimulationError> {
    scenario.validate()?;
    receiver.validate()?;
    schedule.validate()?;
    if per_coil < 2 || !(range_m[0] > 0.0 && range_m[1] > range_m[0]) {
        return Err(SimulationError::InvalidParameter("sweep needs 2+ stations over a positive range".into()));
    }
    let period = schedule.adc_period_ms();
    let ticks: Vec<f64> = (0..)
        .map(|k| k as f64 * period)
        .take_while(|t| *t < schedule.window_ms)
        .filter(|t| schedule.in_steady_state(*t))
        .collect();
    let windows = (SWEEP_DWELL_MS / schedule.cycle_ms()).ceil().max(1.0) as usize;
    let mut rng = sub_rng(seed, 3);
    let mut out = Vec::with_capacity(per_coil * scenario.coils.len());
    for (c, pose) in scenario.poses().iter().enumerate() {
        for i in 0..per_coil {
            let d = range_m[0] + (range_m[1] - range_m[0]) * i as f64 / (per_coil - 1) as f64;
            let p = pose.position + pose.normal() * d;
            let b = dipole_field(pose, &scenario.coil, &p)?;
            let mut sum = 0.0;
            for _ in 0..windows * ticks.len() {
                let noise = draw_noise_db(&mut rng, receiver);
                sum += strength_from_field(&b, &scenario.coil, receiver, noise)? as f64;
            }
            out.push((
                c,
                CalibrationPair {
                    strength: sum / (windows * ticks.len()).max(1) as f64,
                    distance_m: d,
                },
            ));
        }
    }
    Ok(out)
}
