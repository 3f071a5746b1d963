//! Trajectory alignment and per-axis error statistics.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::positioning::PositionEstimate;
use crate::simulation::TruthSample;

pub const AXES: [&str; 3] = ["x", "y", "z"];
pub const REPORT_CSV_HEADER: &str = "scenario,axis,mae_m,std_m,n";

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("no estimate lies within {tolerance_ms} ms of a truth sample")]
    EmptyOverlap { tolerance_ms: f64 },
    #[error("{0} stream is not sorted by timestamp")]
    Unsorted(&'static str),
    #[error("no aligned pairs to evaluate")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("report parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedPair {
    pub timestamp_ms: f64,
    pub estimate: Vec3,
    pub truth: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
    /// Estimates without truth within tolerance, or failed solves.
    pub dropped_estimates: usize,
    /// Truth samples not used by any pair.
    pub dropped_truth: usize,
}

fn is_sorted(ts: impl Iterator<Item = f64>) -> bool {
    let mut last = f64::NEG_INFINITY;
    for t in ts {
        if t < last {
            return false;
        }
        last = t;
    }
    true
}

/// Matches every estimate to its nearest truth sample within `tolerance_ms`.
pub fn align_streams(
    estimates: &[PositionEstimate],
    truth: &[TruthSample],
    tolerance_ms: f64,
) -> Result<Alignment, EvaluationError> {
    if !(tolerance_ms >= 0.0) {
        return Err(EvaluationError::InvalidParameter("tolerance must be non-negative".into()));
    }
    if !is_sorted(estimates.iter().map(|e| e.timestamp_ms)) {
        return Err(EvaluationError::Unsorted("estimate"));
    }
    if !is_sorted(truth.iter().map(|t| t.timestamp_ms)) {
        return Err(EvaluationError::Unsorted("truth"));
    }
    let mut used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    let mut dropped_estimates = 0;
    for e in estimates {
        if e.is_failed() || !e.position.iter().all(|c| c.is_finite()) {
            dropped_estimates += 1;
            continue;
        }
        let i = truth.partition_point(|t| t.timestamp_ms < e.timestamp_ms);
        let nearest = [i.checked_sub(1), (i < truth.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                let da = (truth[a].timestamp_ms - e.timestamp_ms).abs();
                let db = (truth[b].timestamp_ms - e.timestamp_ms).abs();
                da.total_cmp(&db)
            });
        match nearest {
            Some(j) if (truth[j].timestamp_ms - e.timestamp_ms).abs() <= tolerance_ms => {
                used[j] = true;
                pairs.push(AlignedPair {
                    timestamp_ms: e.timestamp_ms,
                    estimate: e.position,
                    truth: truth[j].position,
                });
            }
            _ => dropped_estimates += 1,
        }
    }
    if pairs.is_empty() {
        return Err(EvaluationError::EmptyOverlap { tolerance_ms });
    }
    Ok(Alignment {
        pairs,
        dropped_estimates,
        dropped_truth: used.iter().filter(|u| !**u).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub scenario: String,
    pub mae_m: [f64; 3],
    /// Sample standard deviation of the absolute errors.
    pub std_m: [f64; 3],
    pub n: usize,
}

impl fmt::Display for ErrorReport {
    /// `MAE(Std)` per axis.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", self.scenario)?;
        for k in 0..3 {
            write!(f, " {}: {:.3}({:.3})", AXES[k].to_uppercase(), self.mae_m[k], self.std_m[k])?;
        }
        write!(f, "  n={}", self.n)
    }
}

pub fn compute_errors(pairs: &[AlignedPair], scenario: &str) -> Result<ErrorReport, EvaluationError> {
    let n = pairs.len();
    if n == 0 {
        return Err(EvaluationError::Empty);
    }
    let mut mae = [0.0; 3];
    let mut std = [0.0; 3];
    for k in 0..3 {
        let abs: Vec<f64> = pairs.iter().map(|p| (p.estimate[k] - p.truth[k]).abs()).collect();
        let mean = abs.iter().sum::<f64>() / n as f64;
        mae[k] = mean;
        std[k] = if n > 1 {
            (abs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
    }
    Ok(ErrorReport {
        scenario: scenario.to_string(),
        mae_m: mae,
        std_m: std,
        n,
    })
}

/// Maps estimates from a foreign frame into the truth frame: `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }
}

impl RigidTransform {
    fn matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vec3) -> Self {
        let m = rotation.matrix();
        Self {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: translation.into(),
        }
    }

    pub fn validate(&self) -> Result<(), EvaluationError> {
        let m = self.matrix();
        let orthonormal = (m.transpose() * m - Matrix3::identity()).norm() < 1e-6;
        if !orthonormal || (m.determinant() - 1.0).abs() > 1e-6 || !self.translation.iter().all(|t| t.is_finite()) {
            return Err(EvaluationError::InvalidParameter("transform is not a proper rigid motion".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.matrix() * p + Vec3::from(self.translation)
    }

    pub fn apply_all(&self, estimates: &mut [PositionEstimate]) {
        for e in estimates {
            if !e.is_failed() {
                e.position = self.apply(&e.position);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = EvaluationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(EvaluationError::InvalidParameter(format!("unknown report format '{other}'"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    scenario: String,
    axis: String,
    mae_m: f64,
    std_m: f64,
    n: usize,
}

/// One CSV row per (scenario, axis), or a JSON array of reports.
pub fn report_export(reports: &[ErrorReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in reports {
                for k in 0..3 {
                    w.serialize(ReportRow {
                        scenario: r.scenario.clone(),
                        axis: AXES[k].to_string(),
                        mae_m: r.mae_m[k],
                        std_m: r.std_m[k],
                        n: r.n,
                    })
                    .expect("in-memory csv write");
                }
            }
            String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
        }
    }
}

pub fn report_import(text: &str, format: ReportFormat) -> Result<Vec<ErrorReport>, EvaluationError> {
    match format {
        ReportFormat::Json => serde_json::from_str(text).map_err(|e| EvaluationError::Parse(e.to_string())),
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header = r.headers().map_err(|e| EvaluationError::Parse(e.to_string()))?;
            if header.iter().collect::<Vec<_>>().join(",") != REPORT_CSV_HEADER {
                return Err(EvaluationError::Parse(format!("expected header '{REPORT_CSV_HEADER}'")));
            }
            let mut reports: Vec<ErrorReport> = Vec::new();
            for row in r.deserialize::<ReportRow>() {
                let row = row.map_err(|e| EvaluationError::Parse(e.to_string()))?;
                let k = AXES
                    .iter()
                    .position(|a| *a == row.axis)
                    .ok_or_else(|| EvaluationError::Parse(format!("unknown axis '{}'", row.axis)))?;
                let fresh = match reports.last() {
                    Some(last) => last.scenario != row.scenario || k == 0,
                    None => true,
                };
                if fresh {
                    reports.push(ErrorReport {
                        scenario: row.scenario.clone(),
                        mae_m: [0.0; 3],
                        std_m: [0.0; 3],
                        n: row.n,
                    });
                }
                let rep = reports.last_mut().expect("pushed above");
                rep.mae_m[k] = row.mae_m;
                rep.std_m[k] = row.std_m;
            }
            Ok(reports)
        }
    }
}
