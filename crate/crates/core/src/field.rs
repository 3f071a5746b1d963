//! Magnetic field of a transmitter coil and the voltage it induces.
//!
//! On the coil axis the field of an `n`-turn loop of radius `a` carrying `I`
//! is `mu0 n a^2 I / (2 (a^2 + r^2)^{3/2})`. Off axis the coil is treated as a
//! point dipole with moment `n I pi a^2` along its normal, which agrees with
//! the loop formula to better than 1.5% for `r >= 10a`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

/// Vacuum permeability, H/m.
pub const MU_0: f64 = 4.0 * PI * 1e-7;

/// Default drive frequency of the H-bridge, Hz.
pub const DEFAULT_DRIVE_FREQUENCY_HZ: f64 = 40_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("invalid coil parameter: {0}")]
    InvalidCoil(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("query point {distance:.4} m from the coil centre is inside the dipole domain limit {radius:.4} m")]
    InsideCoil { distance: f64, radius: f64 },
}

/// Physical parameters of a transmitter coil.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoilSpec {
    pub turns: u32,
    pub radius_m: f64,
    pub current_a: f64,
    #[serde(default = "default_drive_frequency")]
    pub drive_frequency_hz: f64,
}

fn default_drive_frequency() -> f64 {
    DEFAULT_DRIVE_FREQUENCY_HZ
}

impl Default for CoilSpec {
    fn default() -> Self {
        Self {
            turns: 200,
            radius_m: 0.015,
            current_a: 0.1,
            drive_frequency_hz: DEFAULT_DRIVE_FREQUENCY_HZ,
        }
    }
}

impl CoilSpec {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.turns < 1 {
            return Err(FieldError::InvalidCoil("turns must be >= 1"));
        }
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(FieldError::InvalidCoil("radius must be > 0"));
        }
        if !(self.current_a > 0.0 && self.current_a.is_finite()) {
            return Err(FieldError::InvalidCoil("current must be > 0"));
        }
        if !(self.drive_frequency_hz > 0.0 && self.drive_frequency_hz.is_finite()) {
            return Err(FieldError::InvalidCoil("drive frequency must be > 0"));
        }
        Ok(())
    }

    /// Magnetic moment magnitude `n I pi a^2`, A m^2.
    pub fn dipole_moment(&self) -> f64 {
        self.turns as f64 * self.current_a * PI * self.radius_m * self.radius_m
    }

    pub fn angular_frequency(&self) -> f64 {
        2.0 * PI * self.drive_frequency_hz
    }
}

/// Magnetic flux density, Tesla.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldVector(pub Vec3);

impl FieldVector {
    pub fn magnitude(&self) -> f64 {
        self.0.norm()
    }
}

impl std::ops::Add for FieldVector {
    type Output = FieldVector;
    fn add(self, rhs: FieldVector) -> FieldVector {
        FieldVector(self.0 + rhs.0)
    }
}

/// Field strength on the coil axis at distance `r` from its centre, Tesla.
pub fn on_axis_field_strength(coil: &CoilSpec, r: f64) -> Result<f64, FieldError> {
    coil.validate()?;
    if !(r >= 0.0 && r.is_finite()) {
        return Err(FieldError::InvalidParameter("distance must be >= 0"));
    }
    let a2 = coil.radius_m * coil.radius_m;
    let s = (a2 + r * r).sqrt();
    Ok(MU_0 * coil.turns as f64 * a2 * coil.current_a / (2.0 * s * s * s))
}

/// Point-dipole field of a coil placed at `coil_pose`, evaluated at `point`.
///
/// The moment is aligned with the pose's local `+z` axis. Points closer than
/// one coil radius to the centre are outside the approximation's domain.
pub fn dipole_field(coil_pose: &Pose, coil: &CoilSpec, point: &Vec3) -> Result<FieldVector, FieldError> {
    coil.validate()?;
    let d = point - coil_pose.position;
    let r = d.norm();
    if !(r > coil.radius_m) {
        return Err(FieldError::InsideCoil {
            distance: r,
            radius: coil.radius_m,
        });
    }
    let m = coil_pose.normal() * coil.dipole_moment();
    let r_hat = d / r;
    let b = (3.0 * m.dot(&r_hat) * r_hat - m) * (MU_0 / (4.0 * PI * r * r * r));
    Ok(FieldVector(b))
}

/// Vector sum of the fields of several simultaneously driven coils.
pub fn superposed_field(sources: &[(Pose, CoilSpec)], point: &Vec3) -> Result<FieldVector, FieldError> {
    sources
        .iter()
        .try_fold(FieldVector(Vec3::zeros()), |acc, (pose, coil)| {
            Ok(acc + dipole_field(pose, coil, point)?)
        })
}

/// Peak amplitude of the EMF induced in a receiver winding, volts.
///
/// `receiver_area_turns` is the effective area-turns product of one receiver
/// axis, m^2.
pub fn induced_voltage_amplitude(
    field_magnitude: f64,
    coil: &CoilSpec,
    receiver_area_turns: f64,
) -> Result<f64, FieldError> {
    coil.validate()?;
    if !(field_magnitude >= 0.0 && field_magnitude.is_finite()) {
        return Err(FieldError::InvalidParameter("field magnitude must be >= 0"));
    }
    if !(receiver_area_turns > 0.0 && receiver_area_turns.is_finite()) {
        return Err(FieldError::InvalidParameter("receiver area-turns must be > 0"));
    }
    Ok(coil.angular_frequency() * receiver_area_turns * field_magnitude)
}
