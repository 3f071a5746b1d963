//! Time-division activation of the transmitter coils and frame assembly.
//!
//! Coil `k` is driven during the first `activation_ms` of window `k` of each
//! cycle; the rest of the window is an unpowered guard interval. The receiver
//! samples continuously and averages the steady-state samples of each coil's
//! activation into one entry of a [`Frame`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::receiver::RawSample;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdmaSchedule {
    pub n_coils: usize,
    pub activation_ms: f64,
    pub window_ms: f64,
    /// Receiver ADC sampling rate.
    pub adc_rate_hz: f64,
    /// Ring-up time skipped at the start of each activation.
    pub settle_ms: f64,
    /// Margin skipped before the end of each activation.
    pub tail_ms: f64,
}

impl Default for TdmaSchedule {
    fn default() -> Self {
        Self {
            n_coils: 6,
            activation_ms: 50.0,
            window_ms: 70.0,
            adc_rate_hz: 166.7,
            settle_ms: 10.0,
            tail_ms: 10.0,
        }
    }
}

impl TdmaSchedule {
    pub fn with_coils(n_coils: usize) -> Self {
        Self {
            n_coils,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.n_coils < 1 {
            return Err(ScheduleError::Invalid("n_coils must be >= 1"));
        }
        if !(self.activation_ms > 0.0 && self.activation_ms <= self.window_ms && self.window_ms.is_finite()) {
            return Err(ScheduleError::Invalid("need 0 < activation_ms <= window_ms"));
        }
        if !(self.adc_rate_hz > 0.0 && self.adc_rate_hz.is_finite()) {
            return Err(ScheduleError::Invalid("adc_rate_hz must be > 0"));
        }
        if !(self.settle_ms >= 0.0 && self.tail_ms >= 0.0 && self.settle_ms + self.tail_ms < self.activation_ms) {
            return Err(ScheduleError::Invalid("settle_ms + tail_ms must be shorter than activation_ms"));
        }
        Ok(())
    }

    pub fn cycle_ms(&self) -> f64 {
        self.n_coils as f64 * self.window_ms
    }

    pub fn guard_ms(&self) -> f64 {
        self.window_ms - self.activation_ms
    }

    pub fn adc_period_ms(&self) -> f64 {
        1000.0 / self.adc_rate_hz
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.cycle_ms()
    }

    /// Start of cycle `cycle`, ms.
    pub fn cycle_start_ms(&self, cycle: i64) -> f64 {
        cycle as f64 * self.cycle_ms()
    }

    /// Coil driven at time `t` (transmitter time), or `None` in a guard interval.
    pub fn active_coil_at(&self, t_ms: f64) -> Option<usize> {
        let (_, coil, offset) = self.locate(t_ms);
        (offset < self.activation_ms).then_some(coil)
    }

    /// `(cycle, window index, offset into window)` of a time instant.
    pub fn locate(&self, t_ms: f64) -> (i64, usize, f64) {
        let cycle_len = self.cycle_ms();
        let cycle = (t_ms / cycle_len).floor();
        let in_cycle = t_ms - cycle * cycle_len;
        let window = ((in_cycle / self.window_ms).floor() as usize).min(self.n_coils - 1);
        let offset = in_cycle - window as f64 * self.window_ms;
        (cycle as i64, window, offset)
    }

    /// Whether an offset into a window lies in the steady-state portion.
    pub fn in_steady_state(&self, offset_ms: f64) -> bool {
        offset_ms >= self.settle_ms && offset_ms < self.activation_ms - self.tail_ms
    }
}

/// Offset of the receiver clock relative to transmitter time.
///
/// `receiver_time = true_time + offset_at(true_time)`. Between
/// synchronizations the offset grows linearly with `drift_ppm`; each resync
/// resets it to a deterministic pseudo-random value within `+-jitter_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockModel {
    /// Offset at `epoch_ms`.
    pub offset_ms: f64,
    pub drift_ppm: f64,
    pub resync_interval_ms: Option<f64>,
    pub jitter_ms: f64,
    pub epoch_ms: f64,
    pub seed: u64,
}

impl Default for ClockModel {
    fn default() -> Self {
        Self::ideal()
    }
}

impl ClockModel {
    pub fn ideal() -> Self {
        Self {
            offset_ms: 0.0,
            drift_ppm: 0.0,
            resync_interval_ms: None,
            jitter_ms: 0.0,
            epoch_ms: 0.0,
            seed: 0,
        }
    }

    pub fn with_offset(offset_ms: f64) -> Self {
        Self {
            offset_ms,
            ..Self::ideal()
        }
    }

    /// Residual offset right after a synchronization at time `t_ms`.
    pub fn jitter_at(&self, t_ms: f64) -> f64 {
        if self.jitter_ms == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ t_ms.to_bits().rotate_left(17));
        rng.random_range(-self.jitter_ms..=self.jitter_ms)
    }

    /// Offset without considering any further resync events.
    fn free_running_offset(&self, t_ms: f64) -> f64 {
        self.offset_ms + self.drift_ppm * 1e-6 * (t_ms - self.epoch_ms)
    }

    /// Effective offset at `t_ms`, applying periodic resyncs after `epoch_ms`.
    pub fn offset_at(&self, t_ms: f64) -> f64 {
        match self.resync_interval_ms {
            Some(interval) if interval > 0.0 && t_ms >= self.epoch_ms + interval => {
                let k = ((t_ms - self.epoch_ms) / interval).floor();
                let boundary = self.epoch_ms + k * interval;
                apply_resync(self, boundary).free_running_offset(t_ms)
            }
            _ => self.free_running_offset(t_ms),
        }
    }

    /// Receiver clock reading at transmitter time `t_ms`.
    pub fn to_receiver(&self, t_ms: f64) -> f64 {
        t_ms + self.offset_at(t_ms)
    }

    /// Transmitter time for a receiver clock reading.
    pub fn to_transmitter(&self, receiver_ms: f64) -> f64 {
        // offset varies by ppm, so two fixed-point steps are exact to well below a nanosecond
        let mut t = receiver_ms - self.offset_at(receiver_ms);
        t = receiver_ms - self.offset_at(t);
        t
    }
}

/// Synchronization event at `t_ms`: the accumulated offset collapses to the
/// jitter residual, the drift rate is unchanged.
pub fn apply_resync(clock: &ClockModel, t_ms: f64) -> ClockModel {
    ClockModel {
        offset_ms: clock.jitter_at(t_ms),
        epoch_ms: t_ms,
        ..*clock
    }
}

/// One cycle's per-coil strength readings.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cycle: i64,
    /// Cycle start in corrected receiver time, ms.
    pub timestamp_ms: f64,
    /// Mean steady-state strength per coil, raw counts.
    pub strengths: Vec<Option<f64>>,
    pub sample_counts: Vec<usize>,
    /// Mean corrected time of the samples behind each entry, ms.
    pub sample_times_ms: Vec<Option<f64>>,
    /// Samples whose acquisition label disagrees with the schedule slot they were filed under.
    pub misattributed: usize,
}

impl Frame {
    pub fn is_complete(&self) -> bool {
        self.strengths.iter().all(Option::is_some)
    }

    pub fn n_coils(&self) -> usize {
        self.strengths.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyncDiagnostics {
    pub frames: usize,
    pub incomplete_frames: usize,
    pub misattributed_samples: usize,
    /// Samples outside every steady-state slot (ring-up, tail, guard).
    pub unused_samples: usize,
    /// The stream ended part way through a cycle; that cycle was not emitted.
    pub trailing_partial: bool,
}

impl SyncDiagnostics {
    /// Any sample was filed under the wrong coil or a guard interval.
    pub fn sync_loss(&self) -> bool {
        self.misattributed_samples > 0
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    sum: f64,
    time_sum: f64,
    count: usize,
}

/// Streaming frame assembler with single-consumer semantics.
///
/// Samples must arrive in non-decreasing timestamp order.
#[derive(Debug, Clone)]
pub struct FrameAssembler {
    schedule: TdmaSchedule,
    clock: ClockModel,
    cycle: Option<i64>,
    acc: Vec<Accumulator>,
    misattributed: usize,
    diagnostics: SyncDiagnostics,
}

impl FrameAssembler {
    /// `clock` is the receiver's own model of its offset, used to correct
    /// sample timestamps before slot attribution.
    pub fn new(schedule: TdmaSchedule, clock: ClockModel) -> Result<Self, ScheduleError> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            clock,
            cycle: None,
            acc: vec![Accumulator::default(); schedule.n_coils],
            misattributed: 0,
            diagnostics: SyncDiagnostics::default(),
        })
    }

    pub fn diagnostics(&self) -> SyncDiagnostics {
        self.diagnostics
    }

    fn take_frame(&mut self, cycle: i64) -> Frame {
        let mut strengths = Vec::with_capacity(self.acc.len());
        let mut counts = Vec::with_capacity(self.acc.len());
        let mut times = Vec::with_capacity(self.acc.len());
        for a in self.acc.iter_mut() {
            if a.count > 0 {
                strengths.push(Some(a.sum / a.count as f64));
                times.push(Some(a.time_sum / a.count as f64));
            } else {
                strengths.push(None);
                times.push(None);
            }
            counts.push(a.count);
            *a = Accumulator::default();
        }
        let frame = Frame {
            cycle,
            timestamp_ms: self.schedule.cycle_start_ms(cycle),
            strengths,
            sample_counts: counts,
            sample_times_ms: times,
            misattributed: self.misattributed,
        };
        self.misattributed = 0;
        self.diagnostics.frames += 1;
        if !frame.is_complete() {
            self.diagnostics.incomplete_frames += 1;
        }
        frame
    }

    /// Feeds one sample; returns the frames of any cycles it closed.
    pub fn push(&mut self, sample: &RawSample) -> Vec<Frame> {
        let t = self.clock.to_transmitter(sample.timestamp_ms);
        let (cycle, slot, offset) = self.schedule.locate(t);
        let mut out = Vec::new();
        match self.cycle {
            None => self.cycle = Some(cycle),
            Some(current) if cycle > current => {
                out.push(self.take_frame(current));
                for skipped in current + 1..cycle {
                    out.push(self.take_frame(skipped));
                }
                self.cycle = Some(cycle);
            }
            _ => {}
        }
        if self.schedule.in_steady_state(offset) {
            let a = &mut self.acc[slot];
            a.sum += sample.strength as f64;
            a.time_sum += t;
            a.count += 1;
            if sample.coil_id != Some(slot) {
                self.misattributed += 1;
                self.diagnostics.misattributed_samples += 1;
            }
        } else {
            self.diagnostics.unused_samples += 1;
        }
        out
    }

    /// Flushes the last cycle if it is complete.
    pub fn finish(mut self) -> (Option<Frame>, SyncDiagnostics) {
        let last = match self.cycle {
            Some(cycle) if self.acc.iter().all(|a| a.count > 0) => Some(self.take_frame(cycle)),
            Some(_) => {
                self.diagnostics.trailing_partial = true;
                None
            }
            None => None,
        };
        (last, self.diagnostics)
    }
}

/// Batch form of [`FrameAssembler`].
pub fn assemble_frames<'a, I>(
    samples: I,
    schedule: &TdmaSchedule,
    clock: &ClockModel,
) -> Result<(Vec<Frame>, SyncDiagnostics), ScheduleError>
where
    I: IntoIterator<Item = &'a RawSample>,
{
    let mut asm = FrameAssembler::new(*schedule, *clock)?;
    let mut frames = Vec::new();
    for s in samples {
        frames.extend(asm.push(s));
    }
    let (last, diag) = asm.finish();
    frames.extend(last);
    Ok((frames, diag))
}
