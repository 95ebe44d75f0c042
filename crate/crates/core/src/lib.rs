//! Lifted-linear model identification and predictive force control for a
//! quadruped single-rigid-body plant, plus the batch simulation harness that
//! exercises both.
//!
//! Pipeline: `srb` simulates the plant, `koopman` fits a discrete linear
//! model in a rotation-augmented dictionary from randomized rollouts, `mpc`
//! condenses that model into a dense quadratic program over stance forces,
//! `qp` solves it, `gait` and `estimator` close the loop around leg
//! kinematics and velocity estimation, and `sim` runs full scenarios with
//! logging.

pub mod error;
pub mod estimator;
pub mod gait;
pub mod koopman;
pub mod mpc;
mod par;
pub mod qp;
pub mod sim;
pub mod srb;

pub use error::{Error, Result};
