//! Shared geometric types.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// World-frame vector in meters (or Tesla when used as a field vector).
pub type Vec3 = Vector3<f64>;

/// Placement of a rigid body in the world frame.
///
/// For a coil the local `+z` axis is the coil normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    /// Pose at `position` whose local `+z` axis points along `normal`.
    ///
    /// Returns `None` if `normal` is zero or not finite.
    pub fn facing(position: Vec3, normal: Vec3) -> Option<Self> {
        let norm = normal.norm();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        let n = normal / norm;
        let z = Vec3::z();
        let orientation = match UnitQuaternion::rotation_between(&z, &n) {
            Some(q) => q,
            // antiparallel: any half turn about an axis orthogonal to z
            None => UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
        };
        Some(Self::new(position, orientation))
    }

    /// Unit vector of the local `+z` axis in world coordinates.
    pub fn normal(&self) -> Vec3 {
        self.orientation * Vec3::z()
    }

    pub fn is_valid(&self) -> bool {
        let q = self.orientation.quaternion();
        self.position.iter().all(|c| c.is_finite()) && (q.norm() - 1.0).abs() <= 1e-9
    }
}

/// Axis-aligned box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    /// Point at fractional coordinates `u` (each in `[0, 1]`).
    pub fn lerp(&self, u: [f64; 3]) -> Vec3 {
        Vec3::new(
            self.min[0] + u[0] * (self.max[0] - self.min[0]),
            self.min[1] + u[1] * (self.max[1] - self.min[1]),
            self.min[2] + u[2] * (self.max[2] - self.min[2]),
        )
    }

    /// Regular grid with `per_axis` points along each axis, corners included.
    pub fn grid(&self, per_axis: usize) -> Vec<Vec3> {
        let steps = per_axis.max(1);
        let frac = |i: usize| {
            if steps == 1 {
                0.5
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(steps * steps * steps);
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    out.push(self.lerp([frac(i), frac(j), frac(k)]));
                }
            }
        }
        out
    }
}
