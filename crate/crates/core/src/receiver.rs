//! Tri-axis receiver coil and its analog/digital chain.
//!
//! The chain is modelled functionally: the band-pass filter is an ideal
//! envelope extractor, the logarithmic amplifier maps the envelope amplitude
//! to `slope * (dBV - intercept)`, and the ADC quantizes the amplifier output
//! to an unsigned code. Measurement noise is Gaussian in the dB domain
//! (multiplicative log-normal on the envelope amplitude).

use nalgebra::UnitQuaternion;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{dipole_field, induced_voltage_amplitude, CoilSpec, FieldError, FieldVector};
use crate::geometry::{Pose, Vec3};

/// Per-sample measurement noise applied at the amplifier input, dB.
///
/// Tuned so that per-coil distance estimates scatter by a few centimetres
/// to a decimetre at desk-scale ranges.
pub const DEFAULT_NOISE_SIGMA_DB: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReceiverError {
    #[error("invalid receiver parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("amplifier input must be > 0 V, got {0}")]
    NonPositiveInput(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Raw counts from one ADC conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    /// Receiver clock, milliseconds.
    pub timestamp_ms: f64,
    /// Coil driven when the sample was acquired, if any.
    pub coil_id: Option<usize>,
    pub strength: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReceiverSpec {
    /// Effective area-turns product of each winding, m^2.
    pub axis_area_turns: f64,
    /// Rotation from receiver axes to world axes.
    #[serde(with = "quat_wxyz")]
    pub orientation: UnitQuaternion<f64>,
    /// Log amplifier slope, V/dB.
    pub amp_slope: f64,
    /// Input level producing 0 V output, dBV.
    pub amp_intercept_dbv: f64,
    pub adc_bits: u32,
    pub adc_fullscale_v: f64,
    /// Standard deviation of the dB-domain noise per ADC sample.
    pub noise_sigma_db: f64,
}

impl Default for ReceiverSpec {
    fn default() -> Self {
        Self {
            axis_area_turns: 0.05,
            orientation: UnitQuaternion::identity(),
            amp_slope: 0.024,
            amp_intercept_dbv: -125.0,
            adc_bits: 24,
            adc_fullscale_v: 3.0,
            noise_sigma_db: DEFAULT_NOISE_SIGMA_DB,
        }
    }
}

impl ReceiverSpec {
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma_db = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), ReceiverError> {
        if !(self.axis_area_turns > 0.0 && self.axis_area_turns.is_finite()) {
            return Err(ReceiverError::InvalidParameter("axis_area_turns must be > 0"));
        }
        if !(1..=32).contains(&self.adc_bits) {
            return Err(ReceiverError::InvalidParameter("adc_bits must be in 1..=32"));
        }
        if !(self.adc_fullscale_v > 0.0 && self.adc_fullscale_v.is_finite()) {
            return Err(ReceiverError::InvalidParameter("adc_fullscale_v must be > 0"));
        }
        if !(self.amp_slope > 0.0 && self.amp_slope.is_finite()) {
            return Err(ReceiverError::InvalidParameter("amp_slope must be > 0"));
        }
        if !self.amp_intercept_dbv.is_finite() {
            return Err(ReceiverError::InvalidParameter("amp_intercept_dbv must be finite"));
        }
        if !(self.noise_sigma_db >= 0.0 && self.noise_sigma_db.is_finite()) {
            return Err(ReceiverError::InvalidParameter("noise_sigma_db must be >= 0"));
        }
        Ok(())
    }

    /// Largest ADC code, `2^bits - 1`.
    pub fn max_code(&self) -> u32 {
        ((1u64 << self.adc_bits) - 1) as u32
    }

    /// ADC counts per dB of input level change (below saturation).
    pub fn counts_per_db(&self) -> f64 {
        self.amp_slope / self.adc_fullscale_v * self.max_code() as f64
    }
}

/// Field expressed in the receiver's three winding axes.
pub fn sense_axes(field: &FieldVector, receiver: &ReceiverSpec) -> Vec3 {
    receiver.orientation.inverse_transform_vector(&field.0)
}

/// Magnitude seen by the tri-axis receiver; independent of its orientation.
pub fn sense_magnitude(field: &FieldVector, receiver: &ReceiverSpec) -> f64 {
    sense_axes(field, receiver).norm()
}

/// Logarithmic amplifier transfer: `slope * (20 log10(v_in) - intercept)`.
pub fn log_amplify(v_in: f64, receiver: &ReceiverSpec) -> Result<f64, ReceiverError> {
    if !(v_in > 0.0) || !v_in.is_finite() {
        return Err(ReceiverError::NonPositiveInput(v_in));
    }
    Ok(receiver.amp_slope * (20.0 * v_in.log10() - receiver.amp_intercept_dbv))
}

/// Clamp to `[0, fullscale]` and round to the nearest code.
pub fn adc_quantize(v: f64, receiver: &ReceiverSpec) -> u32 {
    let max = receiver.max_code() as f64;
    let clamped = if v.is_nan() { 0.0 } else { v.clamp(0.0, receiver.adc_fullscale_v) };
    (clamped / receiver.adc_fullscale_v * max).round() as u32
}

/// Induced amplitude to ADC code, with `noise_db` added to the input level.
///
/// A zero amplitude is the amplifier floor and maps to code 0.
pub fn digitize(v_in: f64, noise_db: f64, receiver: &ReceiverSpec) -> u32 {
    if !(v_in > 0.0) {
        return 0;
    }
    let noisy = v_in * 10f64.powf(noise_db / 20.0);
    match log_amplify(noisy, receiver) {
        Ok(v) => adc_quantize(v, receiver),
        Err(_) => 0,
    }
}

/// Rectified strength for a sensed field, given a realized noise draw in dB.
pub fn strength_from_field(
    field: &FieldVector,
    coil: &CoilSpec,
    receiver: &ReceiverSpec,
    noise_db: f64,
) -> Result<u32, ReceiverError> {
    let b = sense_magnitude(field, receiver);
    let v = induced_voltage_amplitude(b, coil, receiver.axis_area_turns)?;
    Ok(digitize(v, noise_db, receiver))
}

/// Per-winding rectified strengths (each axis through its own chain).
pub fn axis_strengths(
    field: &FieldVector,
    coil: &CoilSpec,
    receiver: &ReceiverSpec,
    noise_db: [f64; 3],
) -> Result<[u32; 3], ReceiverError> {
    let axes = sense_axes(field, receiver);
    let mut out = [0u32; 3];
    for k in 0..3 {
        let v = induced_voltage_amplitude(axes[k].abs(), coil, receiver.axis_area_turns)?;
        out[k] = digitize(v, noise_db[k], receiver);
    }
    Ok(out)
}

/// Draws one dB-domain noise value.
pub fn draw_noise_db<R: rand::Rng + ?Sized>(rng: &mut R, receiver: &ReceiverSpec) -> f64 {
    if receiver.noise_sigma_db == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    z * receiver.noise_sigma_db
}

/// One complete measurement: dipole field, tri-axis sensing, induction,
/// log amplification with noise, quantization. Deterministic in `rng_seed`.
pub fn measure(
    coil_pose: &Pose,
    coil: &CoilSpec,
    receiver_position: &Vec3,
    receiver: &ReceiverSpec,
    rng_seed: u64,
) -> Result<u32, ReceiverError> {
    receiver.validate()?;
    let field = dipole_field(coil_pose, coil, receiver_position)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = draw_noise_db(&mut rng, receiver);
    strength_from_field(&field, coil, receiver, noise)
}

mod quat_wxyz {
    use nalgebra::{Quaternion, UnitQuaternion};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(q: &UnitQuaternion<f64>, s: S) -> Result<S::Ok, S::Error> {
        [q.w, q.i, q.j, q.k].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UnitQuaternion<f64>, D::Error> {
        let [w, i, j, k] = <[f64; 4]>::deserialize(d)?;
        let q = Quaternion::new(w, i, j, k);
        if !(q.norm() > 0.0) {
            return Err(serde::de::Error::custom("orientation quaternion must be non-zero"));
        }
        Ok(UnitQuaternion::from_quaternion(q))
    }
}
