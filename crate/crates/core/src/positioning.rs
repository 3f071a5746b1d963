//! True-range multilateration and trajectory smoothing.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, Vec3};

/// Beacons whose smallest centered singular value falls below this fraction
/// of the largest are treated as coplanar.
pub const COPLANARITY_RATIO: f64 = 1e-6;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PositioningError {
    #[error("underdetermined: {valid} valid distances, need at least 4")]
    Underdetermined { valid: usize },
    #[error("distance vector has {got} entries, beacon set has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeaconSet {
    beacons: Vec<(usize, Vec3)>,
    centroid: Vec3,
    singular_values: [f64; 3],
    plane_normal: Vec3,
}

impl BeaconSet {
    pub fn new(beacons: Vec<(usize, Vec3)>) -> Result<Self, PositioningError> {
        if beacons.is_empty() {
            return Err(PositioningError::InvalidParameter("empty beacon set".into()));
        }
        if beacons.iter().any(|(_, p)| !p.iter().all(|c| c.is_finite())) {
            return Err(PositioningError::InvalidParameter("beacon position not finite".into()));
        }
        let n = beacons.len();
        let centroid = beacons.iter().map(|(_, p)| p).sum::<Vec3>() / n as f64;
        let m = DMatrix::from_fn(n, 3, |i, j| beacons[i].1[j] - centroid[j]);
        let svd = m.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut singular_values = [0.0; 3];
        for (k, &i) in order.iter().enumerate() {
            singular_values[k] = svd.singular_values[i];
        }
        // with fewer than 3 beacons the thin SVD has no third direction
        let plane_normal = if order.len() == 3 {
            let row = v_t.row(order[2]);
            Vec3::new(row[0], row[1], row[2])
        } else {
            Vec3::z()
        };
        Ok(Self {
            beacons,
            centroid,
            singular_values,
            plane_normal,
        })
    }

    pub fn from_positions(positions: &[Vec3]) -> Result<Self, PositioningError> {
        Self::new(positions.iter().copied().enumerate().collect())
    }

    pub fn len(&self) -> usize {
        self.beacons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beacons.is_empty()
    }

    pub fn beacons(&self) -> &[(usize, Vec3)] {
        &self.beacons
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vec3> {
        self.beacons.iter().map(|(_, p)| p)
    }

    pub fn centroid(&self) -> Vec3 {
        self.centroid
    }

    /// Singular values of the centered position matrix, largest first.
    pub fn singular_values(&self) -> [f64; 3] {
        self.singular_values
    }

    /// Smallest singular value of the centered position matrix, meters.
    pub fn non_coplanarity(&self) -> f64 {
        self.singular_values[2]
    }

    pub fn is_degenerate(&self) -> bool {
        self.beacons.len() < 4 || self.singular_values[2] < COPLANARITY_RATIO * self.singular_values[0]
    }

    /// Normal of the least-squares plane through the beacons.
    pub fn plane_normal(&self) -> Vec3 {
        self.plane_normal
    }

    /// Reflection of `p` through the beacons' best-fit plane.
    pub fn mirror(&self, p: &Vec3) -> Vec3 {
        let n = self.plane_normal;
        p - 2.0 * (p - self.centroid).dot(&n) * n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceVector {
    pub timestamp_ms: f64,
    pub distances: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DistanceVector {
    /// Marks every positive finite distance valid.
    pub fn all_valid(timestamp_ms: f64, distances: Vec<f64>) -> Self {
        let valid = distances.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self {
            timestamp_ms,
            distances,
            valid,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid
            .iter()
            .zip(&self.distances)
            .filter(|(v, d)| **v && d.is_finite() && **d > 0.0)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEstimate {
    pub timestamp_ms: f64,
    /// NaN when the solve failed.
    pub position: Vec3,
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub degenerate_geometry: bool,
    /// Some range residual exceeds the outlier threshold.
    pub outlier: bool,
    pub failure: Option<String>,
}

impl PositionEstimate {
    pub fn failed(timestamp_ms: f64, reason: String) -> Self {
        Self {
            timestamp_ms,
            position: Vec3::repeat(f64::NAN),
            residual_rms: f64::NAN,
            iterations: 0,
            converged: false,
            gradient_norm: f64::NAN,
            degenerate_geometry: false,
            outlier: false,
            failure: Some(reason),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance_m: f64,
    pub outlier_threshold_m: f64,
    /// Probe a coarse grid for better basins after the local solve.
    pub global_search: bool,
    pub grid_per_axis: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-9,
            step_tolerance_m: 1e-10,
            outlier_threshold_m: 0.5,
            global_search: true,
            grid_per_axis: 13,
        }
    }
}

/// Valid `(beacon, distance)` pairs of one frame.
struct Problem {
    rows: Vec<(Vec3, f64)>,
}

impl Problem {
    fn objective(&self, p: &Vec3) -> f64 {
        self.rows.iter().map(|(b, d)| ((p - b).norm() - d).powi(2)).sum()
    }

    fn residuals(&self, p: &Vec3) -> impl Iterator<Item = f64> + '_ {
        let p = *p;
        self.rows.iter().map(move |(b, d)| (p - b).norm() - d)
    }

    /// `(JᵀJ, Jᵀr, f)` at `p`.
    fn normal_equations(&self, p: &Vec3) -> (Matrix3<f64>, Vector3<f64>, f64) {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut f = 0.0;
        for (b, d) in &self.rows {
            let diff = p - b;
            let range = diff.norm();
            let u = if range > 1e-12 { diff / range } else { Vec3::x() };
            let r = range - d;
            jtj += u * u.transpose();
            jtr += u * r;
            f += r * r;
        }
        (jtj, jtr, f)
    }
}

struct LocalResult {
    position: Vec3,
    objective: f64,
    gradient_norm: f64,
    iterations: usize,
}

/// Levenberg-damped Gauss-Newton from `start`.
fn local_solve(problem: &Problem, start: Vec3, opts: &SolverOptions) -> LocalResult {
    let mut p = start;
    let (mut jtj, mut jtr, mut f) = problem.normal_equations(&p);
    let mut lambda = 1e-3 * jtj.diagonal().max().max(1e-12);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        if 2.0 * jtr.norm() < opts.gradient_tolerance {
            break;
        }
        let mut accepted = None;
        while lambda < 1e16 {
            let a = jtj + Matrix3::identity() * lambda;
            let step = match a.cholesky() {
                Some(c) => c.solve(&(-jtr)),
                None => {
                    lambda *= 4.0;
                    continue;
                }
            };
            let candidate = p + step;
            let fc = problem.objective(&candidate);
            if fc < f {
                lambda = (lambda / 3.0).max(1e-15);
                accepted = Some((candidate, step.norm()));
                break;
            }
            lambda *= 4.0;
        }
        let Some((next, step_norm)) = accepted else {
            break;
        };
        iterations += 1;
        p = next;
        (jtj, jtr, f) = problem.normal_equations(&p);
        if step_norm < opts.step_tolerance_m {
            break;
        }
    }
    LocalResult {
        position: p,
        objective: f,
        gradient_norm: 2.0 * jtr.norm(),
        iterations,
    }
}

/// Box that must contain any reasonable minimizer: the intersection of the
/// range shells, padded, or the padded beacon hull if that is empty.
fn search_box(problem: &Problem) -> BoundingBox {
    let d_max = problem.rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let pad = 0.25 * d_max + 0.1;
    let mut lo = [f64::NEG_INFINITY; 3];
    let mut hi = [f64::INFINITY; 3];
    for (b, d) in &problem.rows {
        for k in 0..3 {
            lo[k] = lo[k].max(b[k] - d - pad);
            hi[k] = hi[k].min(b[k] + d + pad);
        }
    }
    if (0..3).all(|k| lo[k] < hi[k]) {
        return BoundingBox::new(lo, hi);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (b, _) in &problem.rows {
        for k in 0..3 {
            lo[k] = lo[k].min(b[k] - d_max - pad);
            hi[k] = hi[k].max(b[k] + d_max + pad);
        }
    }
    BoundingBox::new(lo, hi)
}

/// Grid points that are no worse than their 26 neighbours, best first.
fn grid_basins(problem: &Problem, per_axis: usize, keep: usize) -> Vec<Vec3> {
    let n = per_axis.max(2);
    let bx = search_box(problem);
    let at = |i: usize, j: usize, k: usize| {
        let s = (n - 1) as f64;
        bx.lerp([i as f64 / s, j as f64 / s, k as f64 / s])
    };
    let idx = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    let mut values = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                values[idx(i, j, k)] = problem.objective(&at(i, j, k));
            }
        }
    }
    let mut minima = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = values[idx(i, j, k)];
                let mut is_min = true;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if (di, dj, dk) == (0, 0, 0) || [a, b, c].iter().any(|&x| x < 0 || x >= n as i64) {
                                continue;
                            }
                            if values[idx(a as usize, b as usize, c as usize)] < v {
                                is_min = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if is_min {
                    minima.push((v, at(i, j, k)));
                }
            }
        }
    }
    minima.sort_by(|a, b| a.0.total_cmp(&b.0));
    minima.into_iter().take(keep).map(|m| m.1).collect()
}

pub fn multilaterate(
    beacons: &BeaconSet,
    distances: &DistanceVector,
    initial_guess: Vec3,
) -> Result<PositionEstimate, PositioningError> {
    multilaterate_with(beacons, distances, initial_guess, &SolverOptions::default())
}

/// Minimizes `Σ (‖p − pᵢ‖ − dᵢ)²` over the valid distances.
///
/// The local solve starts at `initial_guess`. Restarts from the mirror image
/// through the beacon plane and, with `global_search`, from coarse-grid basins
/// replace it only when they reach a strictly lower objective.
pub fn multilaterate_with(
    beacons: &BeaconSet,
    distances: &DistanceVector,
    initial_guess: Vec3,
    opts: &SolverOptions,
) -> Result<PositionEstimate, PositioningError> {
    if distances.distances.len() != beacons.len() || distances.valid.len() != beacons.len() {
        return Err(PositioningError::LengthMismatch {
            expected: beacons.len(),
            got: distances.distances.len(),
        });
    }
    if !initial_guess.iter().all(|c| c.is_finite()) {
        return Err(PositioningError::InvalidParameter("initial guess not finite".into()));
    }
    let rows: Vec<(Vec3, f64)> = beacons
        .positions()
        .zip(distances.distances.iter().zip(&distances.valid))
        .filter(|(_, (d, v))| **v && d.is_finite() && **d > 0.0)
        .map(|(b, (d, _))| (*b, *d))
        .collect();
    if rows.len() < 4 {
        return Err(PositioningError::Underdetermined { valid: rows.len() });
    }
    let problem = Problem { rows };

    let mut best = local_solve(&problem, initial_guess, opts);
    let mut starts = vec![beacons.mirror(&best.position)];
    if opts.global_search {
        starts.extend(grid_basins(&problem, opts.grid_per_axis, 4));
    }
    for s in starts {
        let r = local_solve(&problem, s, opts);
        if r.objective < best.objective - 1e-12 * (1.0 + best.objective)
            || (r.objective < best.objective && r.gradient_norm < best.gradient_norm)
        {
            best = r;
        }
    }

    let n = problem.rows.len() as f64;
    let outlier = problem
        .residuals(&best.position)
        .any(|r| r.abs() > opts.outlier_threshold_m);
    Ok(PositionEstimate {
        timestamp_ms: distances.timestamp_ms,
        position: best.position,
        residual_rms: (best.objective / n).sqrt(),
        iterations: best.iterations,
        converged: best.gradient_norm < opts.gradient_tolerance,
        gradient_norm: best.gradient_norm,
        degenerate_geometry: beacons.is_degenerate(),
        outlier,
        failure: None,
    })
}

/// Sequential solver that warm-starts each frame from the last converged fix.
#[derive(Debug, Clone)]
pub struct StreamSolver {
    beacons: BeaconSet,
    opts: SolverOptions,
    last: Option<Vec3>,
}

impl StreamSolver {
    pub fn new(beacons: BeaconSet, opts: SolverOptions) -> Self {
        Self {
            beacons,
            opts,
            last: None,
        }
    }

    pub fn initial_guess(&self) -> Vec3 {
        self.last.unwrap_or_else(|| self.beacons.centroid())
    }

    pub fn solve(&mut self, frame: &DistanceVector) -> PositionEstimate {
        match multilaterate_with(&self.beacons, frame, self.initial_guess(), &self.opts) {
            Ok(est) => {
                if est.converged {
                    self.last = Some(est.position);
                }
                est
            }
            Err(e) => PositionEstimate::failed(frame.timestamp_ms, e.to_string()),
        }
    }
}

pub fn solve_stream<'a, I>(beacons: &BeaconSet, frames: I) -> Vec<PositionEstimate>
where
    I: IntoIterator<Item = &'a DistanceVector>,
{
    let mut solver = StreamSolver::new(beacons.clone(), SolverOptions::default());
    frames.into_iter().map(|f| solver.solve(f)).collect()
}

/// Centered moving average per axis.
///
/// Near the stream edges the window shrinks symmetrically. Failed estimates
/// are skipped as neighbours and passed through unchanged.
pub fn smooth_trajectory(estimates: &[PositionEstimate], window: usize) -> Result<Vec<PositionEstimate>, PositioningError> {
    if window < 1 {
        return Err(PositioningError::InvalidParameter("smoothing window must be at least 1".into()));
    }
    let n = estimates.len();
    let left = (window - 1) / 2;
    let right = window / 2;
    let mut out = Vec::with_capacity(n);
    for (i, est) in estimates.iter().enumerate() {
        if est.is_failed() {
            out.push(est.clone());
            continue;
        }
        let (mut l, mut r) = (left.min(i), right.min(n - 1 - i));
        if l < left || r < right {
            l = l.min(r);
            r = l;
        }
        let (sum, count) = estimates[i - l..=i + r]
            .iter()
            .filter(|e| !e.is_failed())
            .fold((Vec3::zeros(), 0usize), |(s, c), e| (s + e.position, c + 1));
        let mut smoothed = est.clone();
        smoothed.position = sum / count as f64;
        out.push(smoothed);
    }
    Ok(out)
}

/// Error amplification at one query point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointQuality {
    pub point: [f64; 3],
    /// Standard deviation of each coordinate under unit range noise.
    pub amplification: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryReport {
    pub points: Vec<PointQuality>,
    pub mean: [f64; 3],
    pub median: [f64; 3],
    pub max: [f64; 3],
    /// Beacons coplanar or some query point rank deficient.
    pub degenerate: bool,
}

/// Per-axis amplification `sqrt(diag((JᵀJ)⁻¹))` at one point.
pub fn amplification_at(beacons: &BeaconSet, p: &Vec3) -> [f64; 3] {
    let mut jtj = Matrix3::zeros();
    for b in beacons.positions() {
        let diff = p - b;
        let range = diff.norm();
        if range > 1e-12 {
            let u = diff / range;
            jtj += u * u.transpose();
        }
    }
    let eig = jtj.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return [f64::INFINITY; 3];
    }
    match jtj.try_inverse() {
        Some(cov) => [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()],
        None => [f64::INFINITY; 3],
    }
}

/// Dilution report over a regular grid of `per_axis³` points in `region`.
pub fn geometry_quality(beacons: &BeaconSet, region: &BoundingBox, per_axis: usize) -> Result<GeometryReport, PositioningError> {
    if !region.is_valid() {
        return Err(PositioningError::InvalidParameter("invalid region".into()));
    }
    if per_axis < 1 {
        return Err(PositioningError::InvalidParameter("grid needs at least 1 point per axis".into()));
    }
    let points: Vec<PointQuality> = region
        .grid(per_axis)
        .iter()
        .map(|p| PointQuality {
            point: [p.x, p.y, p.z],
            amplification: amplification_at(beacons, p),
        })
        .collect();
    let mut mean = [0.0; 3];
    let mut median = [0.0; 3];
    let mut max = [0.0f64; 3];
    for k in 0..3 {
        let mut col: Vec<f64> = points.iter().map(|q| q.amplification[k]).collect();
        mean[k] = col.iter().sum::<f64>() / col.len() as f64;
        max[k] = col.iter().copied().fold(0.0, f64::max);
        col.sort_by(f64::total_cmp);
        let m = col.len() / 2;
        median[k] = if col.len() % 2 == 1 { col[m] } else { 0.5 * (col[m - 1] + col[m]) };
    }
    let degenerate = beacons.is_degenerate() || points.iter().any(|q| q.amplification.iter().any(|a| a.is_infinite()));
    Ok(GeometryReport {
        points,
        mean,
        median,
        max,
        degenerate,
    })
}
