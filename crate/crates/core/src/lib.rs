//! Bias estimation for asynchronous multi-sensor tracking.
//!
//! A simulated target is observed by several biased radars, one reading per
//! time instance. [`solver::bcd`] estimates every sensor's range, elevation
//! and orientation biases by weighted nonlinear least squares, updating one
//! block of unknowns at a time.

pub mod assembly;
pub mod config;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod output;
pub mod solver;
