//! Batch experiment harness: scenario configs, the closed-loop runner, and
//! run logs with summary metrics.
//!
//! A run wires the pieces together at fixed rates: the plant integrates at
//! the identified model's step size, the force planner runs every
//! [`CONTROL_PERIOD`](control_loop::CONTROL_PERIOD) steps, and the trot
//! state machine switches diagonal pairs on its phase clock. Sensor noise,
//! shoves, and foot slips are injected per the config; everything downstream
//! of the seed is reproducible.

mod config;
mod control_loop;
mod log;

pub use config::{
    CommandSegment, Disturbance, ExperimentConfig, GaitMode, NoiseConfig, PlantConfig,
    RecoveryThreshold, Thresholds,
};
pub use control_loop::{run_experiment, RunOutput, CONTROL_PERIOD};
pub use log::{compute_metrics, evaluate_thresholds, LogRow, RunLog, RunMetrics, ThresholdCheck};
