//! Per-coil strength to distance calibration.
//!
//! Each coil gets a straight line fitted by ordinary least squares with the
//! distance side as the dependent variable. Two responses are supported:
//!
//! - [`Response::Linear`]: `d = a * s + b`
//! - [`Response::LogLinear`]: `ln d = a * s + b`
//!
//! The log amplifier makes the rectified strength affine in the logarithm of
//! the field amplitude, and the field decays with the cube of distance, so
//! the log-linear response is exact for an ideal chain. It is the default.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::positioning::DistanceVector;
use crate::scheduler::Frame;

/// Lower clamp applied to every distance estimate, meters.
pub const MIN_DISTANCE_M: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("need at least 2 calibration pairs, got {0}")]
    InsufficientData(usize),
    #[error("all strengths are identical; slope is undetermined")]
    SingularFit,
    #[error("calibration pair has non-positive or non-finite distance {0}")]
    InvalidDistance(f64),
    #[error("no calibration for coil {0}")]
    MissingCalibration(usize),
    #[error("coil {coil}: {source}")]
    Coil {
        coil: usize,
        #[source]
        source: Box<CalibrationError>,
    },
    #[error("frame at {timestamp_ms} ms is incomplete (coil {coil} missing)")]
    IncompleteFrame { timestamp_ms: f64, coil: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    /// Raw counts.
    pub strength: f64,
    pub distance_m: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Linear,
    #[default]
    LogLinear,
}

impl std::str::FromStr for Response {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Response::Linear),
            "log-linear" | "log_linear" => Ok(Response::LogLinear),
            other => Err(format!("unknown response '{other}' (expected linear or log-linear)")),
        }
    }
}

/// Ordinary least squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    /// RMS of `y` residuals.
    pub rms: f64,
    pub r2: f64,
    /// Closed-form standard errors (zero when `n == 2`).
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
}

/// Fits `y = a x + b` over `(x, y)` points.
pub fn fit_line(points: &[(f64, f64)]) -> Result<LinearFit, CalibrationError> {
    let n = points.len();
    if n < 2 {
        return Err(CalibrationError::InsufficientData(n));
    }
    let nf = n as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(CalibrationError::SingularFit);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = points
        .iter()
        .map(|&(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let (slope_stderr, intercept_stderr) = if n > 2 {
        let s2 = sse / (nf - 2.0);
        let se_a = (s2 / sxx).sqrt();
        let se_b = (s2 * (1.0 / nf + mean_x * mean_x / sxx)).sqrt();
        (se_a, se_b)
    } else {
        (0.0, 0.0)
    };
    Ok(LinearFit {
        slope,
        intercept,
        n,
        rms: (sse / nf).sqrt(),
        r2,
        slope_stderr,
        intercept_stderr,
    })
}

/// Fits `distance = a * strength + b` by ordinary least squares.
pub fn fit_linear(pairs: &[CalibrationPair]) -> Result<LinearFit, CalibrationError> {
    validate_pairs(pairs)?;
    let pts: Vec<(f64, f64)> = pairs.iter().map(|p| (p.strength, p.distance_m)).collect();
    fit_line(&pts)
}

fn validate_pairs(pairs: &[CalibrationPair]) -> Result<(), CalibrationError> {
    if let Some(bad) = pairs.iter().find(|p| !(p.distance_m > 0.0 && p.distance_m.is_finite())) {
        return Err(CalibrationError::InvalidDistance(bad.distance_m));
    }
    Ok(())
}

/// Fitted line of one coil, plus distance-domain diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoilCalibration {
    pub a: f64,
    pub b: f64,
    /// RMS distance residual over the fitting data, meters.
    pub rms: f64,
    /// Coefficient of determination of the distance predictions.
    pub r2: f64,
    #[serde(default)]
    pub response: Response,
}

impl CoilCalibration {
    pub fn linear(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            rms: 0.0,
            r2: 1.0,
            response: Response::Linear,
        }
    }

    /// Unclamped model output, meters.
    pub fn raw_distance(&self, strength: f64) -> f64 {
        let y = self.a * strength + self.b;
        match self.response {
            Response::Linear => y,
            Response::LogLinear => y.exp(),
        }
    }

    pub fn distance(&self, strength: f64) -> f64 {
        let d = self.raw_distance(strength);
        if d.is_nan() || d < MIN_DISTANCE_M {
            MIN_DISTANCE_M
        } else {
            d
        }
    }
}

/// Fits one coil with the given response.
pub fn fit_coil(pairs: &[CalibrationPair], response: Response) -> Result<CoilCalibration, CalibrationError> {
    validate_pairs(pairs)?;
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| match response {
            Response::Linear => (p.strength, p.distance_m),
            Response::LogLinear => (p.strength, p.distance_m.ln()),
        })
        .collect();
    let fit = fit_line(&pts)?;
    let mut cal = CoilCalibration {
        a: fit.slope,
        b: fit.intercept,
        rms: 0.0,
        r2: 0.0,
        response,
    };
    let n = pairs.len() as f64;
    let mean_d = pairs.iter().map(|p| p.distance_m).sum::<f64>() / n;
    let (mut sse, mut sst) = (0.0, 0.0);
    for p in pairs {
        let e = cal.raw_distance(p.strength) - p.distance_m;
        sse += e * e;
        sst += (p.distance_m - mean_d).powi(2);
    }
    cal.rms = (sse / n).sqrt();
    cal.r2 = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    Ok(cal)
}

/// Per-coil calibration, keyed by coil id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibrationModel {
    pub coils: BTreeMap<usize, CoilCalibration>,
}

impl CalibrationModel {
    /// Fits every coil present in `pairs`.
    pub fn fit(pairs: &BTreeMap<usize, Vec<CalibrationPair>>, response: Response) -> Result<Self, CalibrationError> {
        let mut coils = BTreeMap::new();
        for (&coil, p) in pairs {
            let cal = fit_coil(p, response).map_err(|e| CalibrationError::Coil {
                coil,
                source: Box::new(e),
            })?;
            coils.insert(coil, cal);
        }
        Ok(Self { coils })
    }

    pub fn get(&self, coil: usize) -> Result<&CoilCalibration, CalibrationError> {
        self.coils.get(&coil).ok_or(CalibrationError::MissingCalibration(coil))
    }

    /// Requires a record for every coil in `0..n_coils`.
    pub fn check_covers(&self, n_coils: usize) -> Result<(), CalibrationError> {
        (0..n_coils).try_for_each(|c| self.get(c).map(|_| ()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Distance for a coil's strength, clamped below at [`MIN_DISTANCE_M`].
pub fn estimate_distance(model: &CalibrationModel, coil_id: usize, strength: f64) -> Result<f64, CalibrationError> {
    Ok(model.get(coil_id)?.distance(strength))
}

/// Converts a complete frame into per-coil distances (coil order).
pub fn frame_to_distances(model: &CalibrationModel, frame: &Frame) -> Result<DistanceVector, CalibrationError> {
    let mut distances = Vec::with_capacity(frame.n_coils());
    for (coil, s) in frame.strengths.iter().enumerate() {
        let s = s.ok_or(CalibrationError::IncompleteFrame {
            timestamp_ms: frame.timestamp_ms,
            coil,
        })?;
        distances.push(estimate_distance(model, coil, s)?);
    }
    Ok(DistanceVector::all_valid(frame.timestamp_ms, distances))
}
