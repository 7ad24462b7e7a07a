//! Online calibration of time-varying OD demand for simulation-based dynamic
//! traffic assignment.
//!
//! The crate couples a constrained extended Kalman filter over augmented
//! deviation states with a graph-coloring finite-difference Jacobian engine
//! and a deterministic mesoscopic simulator that serves as the measurement
//! function.

pub mod error;
pub mod linalg;
pub mod simulator;
pub mod filter;
pub mod gradient;
pub mod statespace;
pub mod calibration;
pub mod cli;

pub use error::{Error, ErrorClass, Result};
