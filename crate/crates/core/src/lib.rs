//! Induced magnetic field 3D hand tracking.
//!
//! A set of transmitter coils is driven one at a time on a TDMA schedule. A
//! tri-axis receiver coil held in the hand senses the oscillating field; the
//! rectified strength of each coil is mapped to a distance by a per-coil
//! calibration and the hand position is recovered by true-range
//! multilateration followed by sliding-window smoothing.
//!
//! The crate covers the whole chain, with a physics-based simulator standing
//! in for the hardware:
//!
//! - [`field`]: coil field (on-axis loop formula, point dipole) and induced voltage
//! - [`receiver`]: tri-axis sensing, log amplifier, ADC, measurement noise
//! - [`scheduler`]: coil activation schedule, clock model, frame assembly
//! - [`calibration`]: strength to distance fits
//! - [`positioning`]: multilateration, stream solving, smoothing, geometry quality
//! - [`simulation`]: deployment scenarios, trajectories, simulated runs
//! - [`evaluation`]: stream alignment, per-axis MAE/Std reports
//! - [`pipeline`]: calibrate/track compositions shared by the CLI and tests
//! - [`io`]: CSV and JSON interchange formats
//! - [`cli`]: the `magtrack` command line

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod cli;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod positioning;
pub mod receiver;
pub mod scheduler;
pub mod simulation;

pub use geometry::{BoundingBox, Pose, Vec3};
