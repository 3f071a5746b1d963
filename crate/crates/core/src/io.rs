//! CSV interchange files.
//!
//! | file | columns |
//! |------|---------|
//! | samples | `timestamp_ms,coil_id,strength` (empty `coil_id` outside activations) |
//! | truth | `timestamp_ms,x_m,y_m,z_m` |
//! | estimates | `timestamp_ms,x_m,y_m,z_m,residual_rms_m,iterations,converged,outlier,failure` |
//! | calibration pairs | `coil_id,strength,distance_m` |
//!
//! Floats are written in shortest round-trip form, so files are byte-stable.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationPair;
use crate::geometry::Vec3;
use crate::positioning::PositionEstimate;
use crate::receiver::RawSample;
use crate::simulation::TruthSample;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(String),
}

fn csv_error(e: csv::Error) -> IoError {
    let line = e.position().map(|p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    match line {
        Some(line) => IoError::Parse { line, message },
        None => IoError::Csv(message),
    }
}

fn read_rows<T: DeserializeOwned, R: Read>(reader: R, header: &[&str]) -> Result<Vec<T>, IoError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found = r.headers().map_err(csv_error)?.clone();
    for h in header {
        if !found.iter().any(|f| f == *h) {
            return Err(IoError::Parse {
                line: 1,
                message: format!("missing column '{h}' (expected {})", header.join(",")),
            });
        }
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn write_rows<T: Serialize, W: Write>(writer: W, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn create(path: &Path) -> Result<File, IoError> {
    File::create(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    timestamp_ms: f64,
    coil_id: Option<usize>,
    strength: u32,
}

pub fn write_samples<W: Write>(w: W, samples: &[RawSample]) -> Result<(), IoError> {
    write_rows(
        w,
        samples.iter().map(|s| SampleRow {
            timestamp_ms: s.timestamp_ms,
            coil_id: s.coil_id,
            strength: s.strength,
        }),
    )
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<RawSample>, IoError> {
    let rows: Vec<SampleRow> = read_rows(r, &["timestamp_ms", "coil_id", "strength"])?;
    Ok(rows
        .into_iter()
        .map(|s| RawSample {
            timestamp_ms: s.timestamp_ms,
            coil_id: s.coil_id,
            strength: s.strength,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    timestamp_ms: f64,
    x_m: f64,
    y_m: f64,
    z_m: f64,
}

pub fn write_truth<W: Write>(w: W, truth: &[TruthSample]) -> Result<(), IoError> {
    write_rows(
        w,
        truth.iter().map(|t| TruthRow {
            timestamp_ms: t.timestamp_ms,
            x_m: t.position.x,
            y_m: t.position.y,
            z_m: t.position.z,
        }),
    )
}

pub fn read_truth<R: Read>(r: R) -> Result<Vec<TruthSample>, IoError> {
    let rows: Vec<TruthRow> = read_rows(r, &["timestamp_ms", "x_m", "y_m", "z_m"])?;
    Ok(rows
        .into_iter()
        .map(|t| TruthSample {
            timestamp_ms: t.timestamp_ms,
            position: Vec3::new(t.x_m, t.y_m, t.z_m),
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct EstimateRow {
    timestamp_ms: f64,
    x_m: Option<f64>,
    y_m: Option<f64>,
    z_m: Option<f64>,
    residual_rms_m: Option<f64>,
    #[serde(default)]
    iterations: usize,
    converged: bool,
    #[serde(default)]
    outlier: bool,
    #[serde(default)]
    failure: Option<String>,
}

pub fn write_estimates<W: Write>(w: W, estimates: &[PositionEstimate]) -> Result<(), IoError> {
    write_rows(
        w,
        estimates.iter().map(|e| {
            let ok = !e.is_failed();
            EstimateRow {
                timestamp_ms: e.timestamp_ms,
                x_m: ok.then_some(e.position.x),
                y_m: ok.then_some(e.position.y),
                z_m: ok.then_some(e.position.z),
                residual_rms_m: ok.then_some(e.residual_rms),
                iterations: e.iterations,
                converged: e.converged,
                outlier: e.outlier,
                failure: e.failure.clone(),
            }
        }),
    )
}

/// Rows with a failure text or missing coordinates come back as failed estimates.
pub fn read_estimates<R: Read>(r: R) -> Result<Vec<PositionEstimate>, IoError> {
    let rows: Vec<EstimateRow> = read_rows(r, &["timestamp_ms", "x_m", "y_m", "z_m", "converged"])?;
    Ok(rows
        .into_iter()
        .map(|row| match (row.x_m, row.y_m, row.z_m, &row.failure) {
            (Some(x), Some(y), Some(z), None) => PositionEstimate {
                timestamp_ms: row.timestamp_ms,
                position: Vec3::new(x, y, z),
                residual_rms: row.residual_rms_m.unwrap_or(f64::NAN),
                iterations: row.iterations,
                converged: row.converged,
                gradient_norm: f64::NAN,
                degenerate_geometry: false,
                outlier: row.outlier,
                failure: None,
            },
            _ => PositionEstimate::failed(row.timestamp_ms, row.failure.unwrap_or_else(|| "missing position".into())),
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    coil_id: usize,
    strength: f64,
    distance_m: f64,
}

pub fn write_pairs<W: Write>(w: W, pairs: &[(usize, CalibrationPair)]) -> Result<(), IoError> {
    write_rows(
        w,
        pairs.iter().map(|(c, p)| PairRow {
            coil_id: *c,
            strength: p.strength,
            distance_m: p.distance_m,
        }),
    )
}

pub fn read_pairs<R: Read>(r: R) -> Result<Vec<(usize, CalibrationPair)>, IoError> {
    let rows: Vec<PairRow> = read_rows(r, &["coil_id", "strength", "distance_m"])?;
    Ok(rows
        .into_iter()
        .map(|p| {
            (
                p.coil_id,
                CalibrationPair {
                    strength: p.strength,
                    distance_m: p.distance_m,
                },
            )
        })
        .collect())
}
