//! Experiment description: what the robot is asked to do, what gets thrown
//! at it, and what counts as a pass. Serializes to TOML so batch runs are
//! reproducible from a config file plus a seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::srb::NUM_LEGS;

/// Contact strategy for the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitMode {
    /// All four feet stay planted; no swing phase.
    Stand,
    /// Two-beat diagonal trot.
    Trot,
}

/// Rigid-body parameters of the simulated plant. Defaults match the model
/// the bundled identification stage is built around.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Total mass, kg.
    pub mass: f64,
    /// Principal moments of inertia about the CoM, kg m^2.
    pub inertia: [f64; 3],
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            mass: 12.75,
            inertia: [0.1, 0.25, 0.3],
        }
    }
}

impl PlantConfig {
    pub fn to_params(self) -> Result<crate::srb::ModelParams> {
        crate::srb::ModelParams::new(
            self.mass,
            nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
                self.inertia[0],
                self.inertia[1],
                self.inertia[2],
            )),
            nalgebra::Vector3::new(0.0, 0.0, -9.81),
        )
    }
}

/// Injected sensor noise (one-sigma). The velocity filter is configured with
/// the same levels, so it is consistent by construction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Accelerometer, m/s^2 per axis.
    pub accel: f64,
    /// Leg-odometry foot velocity, m/s per axis.
    pub leg_velocity: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            accel: 0.1,
            leg_velocity: 0.05,
        }
    }
}

/// Piecewise-constant command: from `start` onward, track these heading-frame
/// velocities. Segments apply in order; the latest one whose start time has
/// passed wins. Before the first segment the command is zero.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CommandSegment {
    pub start: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl Default for CommandSegment {
    fn default() -> Self {
        Self {
            start: 0.0,
            vx: 0.0,
            vy: 0.0,
            yaw_rate: 0.0,
        }
    }
}

/// One-shot events injected into the run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Disturbance {
    /// Instantaneous state jump: a shove. `dv` is a world-frame velocity
    /// step, `dtheta` adds to the Euler angles, `domega` to the body rates.
    /// The accelerometer sees the velocity step (a real push is a contact
    /// force), so the filter is not blindsided.
    Push {
        time: f64,
        #[serde(default)]
        dv: [f64; 3],
        #[serde(default)]
        dtheta: [f64; 3],
        #[serde(default)]
        domega: [f64; 3],
    },
    /// A planted foot skids to a new spot: its world anchor is displaced
    /// horizontally. Leg index order is FR, FL, RR, RL.
    FootSlip {
        time: f64,
        leg: usize,
        offset: [f64; 2],
    },
}

impl Disturbance {
    pub fn time(&self) -> f64 {
        match self {
            Disturbance::Push { time, .. } | Disturbance::FootSlip { time, .. } => *time,
        }
    }
}

/// Settling check after the last push: tracking error must re-enter the
/// tolerance band within `within` seconds and stay there for the rest of
/// the run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RecoveryThreshold {
    /// Disturbance time the clock starts from.
    pub after: f64,
    /// Allowed settling time, seconds.
    pub within: f64,
    /// Velocity band around the reference, m/s per horizontal axis.
    pub velocity_tol: f64,
    /// Pitch band around the reference, rad.
    pub pitch_tol: f64,
}

/// Pass/fail limits evaluated against the run metrics. Absent fields are
/// not checked.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Pooled horizontal velocity tracking RMSE limit, m/s.
    pub xy_velocity_rmse: Option<f64>,
    /// Yaw rate tracking RMSE limit, rad/s.
    pub yaw_rate_rmse: Option<f64>,
    /// Body height floor over the whole run, m.
    pub min_height: Option<f64>,
    pub recovery: Option<RecoveryThreshold>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Run length, seconds.
    pub duration: f64,
    /// Seed for every noise draw in the run; same seed, same log.
    pub seed: u64,
    pub gait: GaitMode,
    /// Nominal body height and reference z, m.
    pub stand_height: f64,
    /// Trot half-cycle: each diagonal pair holds stance this long, s.
    pub phase_duration: f64,
    /// Swing apex height above the higher endpoint, m.
    pub clearance: f64,
    /// Touchdown shift per m/s of velocity error, s.
    pub raibert_gain: f64,
    /// Feed the controller the filtered velocity (true) or the exact plant
    /// velocity (false). The filter runs and logs either way.
    pub use_estimator: bool,
    pub noise: NoiseConfig,
    /// The integrated reference position is kept within this distance of the
    /// body so a shoved robot chases a nearby target, not an accumulated one.
    pub reference_leash: f64,
    /// Prediction steps for the force planner, each one model step.
    pub mpc_horizon: usize,
    /// Friction coefficient for the contact force cones.
    pub friction: f64,
    /// Stance vertical force floor, N. Positive keeps loaded contacts off
    /// the friction cone apex.
    pub fz_min: f64,
    /// Per-leg vertical force ceiling, N.
    pub fz_max: f64,
    pub plant: PlantConfig,
    pub commands: Vec<CommandSegment>,
    pub disturbances: Vec<Disturbance>,
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            duration: 5.0,
            seed: 0,
            gait: GaitMode::Trot,
            stand_height: 0.3,
            phase_duration: 0.2,
            clearance: 0.05,
            raibert_gain: 0.03,
            use_estimator: true,
            noise: NoiseConfig::default(),
            reference_leash: 0.15,
            mpc_horizon: 10,
            friction: 0.6,
            fz_min: 5.0,
            fz_max: 250.0,
            plant: PlantConfig::default(),
            commands: Vec::new(),
            disturbances: Vec::new(),
            thresholds: Thresholds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration", self.duration),
            ("stand_height", self.stand_height),
            ("phase_duration", self.phase_duration),
            ("reference_leash", self.reference_leash),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig {
                    detail: format!("{name} must be positive, got {v}"),
                });
            }
        }
        if !(self.clearance.is_finite() && self.clearance >= 0.0) {
            return Err(Error::InvalidConfig {
                detail: format!("clearance must be nonnegative, got {}", self.clearance),
            });
        }
        if self.noise.accel < 0.0 || self.noise.leg_velocity < 0.0 {
            return Err(Error::InvalidConfig {
                detail: "noise levels must be nonnegative".into(),
            });
        }
        if self.mpc_horizon == 0 {
            return Err(Error::InvalidConfig {
                detail: "mpc_horizon must be at least 1".into(),
            });
        }
        if !(self.fz_min >= 0.0 && self.fz_min <= self.fz_max) {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "vertical force bounds [{}, {}] invalid",
                    self.fz_min, self.fz_max
                ),
            });
        }
        self.plant.to_params()?;
        for d in &self.disturbances {
            if let Disturbance::FootSlip { leg, .. } = d {
                if *leg >= NUM_LEGS {
                    return Err(Error::InvalidConfig {
                        detail: format!("foot_slip leg index {leg} out of range"),
                    });
                }
            }
            if !(d.time().is_finite() && d.time() >= 0.0) {
                return Err(Error::InvalidConfig {
                    detail: "disturbance times must be nonnegative".into(),
                });
            }
        }
        Ok(())
    }

    /// The active command at time `t`.
    pub fn command_at(&self, t: f64) -> CommandSegment {
        let mut active = CommandSegment::default();
        for seg in &self.commands {
            if seg.start <= t {
                active = *seg;
            }
        }
        active
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::BadArtifact {
            detail: format!("experiment config: {e}"),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::BadArtifact {
            detail: format!("experiment config: {e}"),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Named presets for the stock experiments; `None` for unknown names.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "stand" => Some(Self::stand()),
            "track-velocity" => Some(Self::track_velocity()),
            "track-turn" => Some(Self::track_turn()),
            "push-recovery" => Some(Self::push_recovery()),
            "slip-recovery" => Some(Self::slip_recovery()),
            _ => None,
        }
    }

    pub const PRESET_NAMES: [&'static str; 5] = [
        "stand",
        "track-velocity",
        "track-turn",
        "push-recovery",
        "slip-recovery",
    ];

    /// Static four-leg stand; the simplest closed-loop sanity check.
    pub fn stand() -> Self {
        Self {
            duration: 5.0,
            gait: GaitMode::Stand,
            thresholds: Thresholds {
                min_height: Some(0.15),
                xy_velocity_rmse: Some(0.05),
                ..Thresholds::default()
            },
            ..Self::default()
        }
    }

    /// Trot with stepped velocity commands: forward at 1 s, a lateral
    /// component at 4 s.
    pub fn track_velocity() -> Self {
        Self {
            duration: 10.0,
            commands: vec![
                CommandSegment {
                    start: 1.0,
                    vx: 0.2,
                    ..CommandSegment::default()
                },
                CommandSegment {
                    start: 4.0,
                    vx: 0.2,
                    vy: -0.1,
                    ..CommandSegment::default()
                },
            ],
            thresholds: Thresholds {
                xy_velocity_rmse: Some(0.05),
                min_height: Some(0.15),
                ..Thresholds::default()
            },
            ..Self::default()
        }
    }

    /// Trot through a turn: forward velocity with a yaw-rate step up to
    /// 0.4 rad/s.
    pub fn track_turn() -> Self {
        Self {
            duration: 10.0,
            commands: vec![
                CommandSegment {
                    start: 1.0,
                    vx: 0.15,
                    yaw_rate: 0.2,
                    ..CommandSegment::default()
                },
                CommandSegment {
                    start: 4.0,
                    vx: 0.15,
                    yaw_rate: 0.4,
                    ..CommandSegment::default()
                },
            ],
            thresholds: Thresholds {
                xy_velocity_rmse: Some(0.05),
                yaw_rate_rmse: Some(0.15),
                min_height: Some(0.15),
                ..Thresholds::default()
            },
            ..Self::default()
        }
    }

    /// Trot in place, then a shove: forward velocity step with a pitch kick.
    pub fn push_recovery() -> Self {
        Self {
            duration: 6.0,
            disturbances: vec![Disturbance::Push {
                time: 2.0,
                dv: [0.4, 0.0, 0.0],
                dtheta: [0.0, 6.0_f64.to_radians(), 0.0],
                domega: [0.0, 0.0, 0.0],
            }],
            thresholds: Thresholds {
                min_height: Some(0.15),
                recovery: Some(RecoveryThreshold {
                    after: 2.0,
                    within: 2.0,
                    velocity_tol: 0.05,
                    pitch_tol: 1.0_f64.to_radians(),
                }),
                ..Thresholds::default()
            },
            ..Self::default()
        }
    }

    /// Trot in place while a stance foot skids sideways.
    pub fn slip_recovery() -> Self {
        Self {
            duration: 6.0,
            disturbances: vec![Disturbance::FootSlip {
                time: 2.05,
                leg: 0,
                offset: [0.05, 0.03],
            }],
            thresholds: Thresholds {
                min_height: Some(0.15),
                recovery: Some(RecoveryThreshold {
                    after: 2.05,
                    within: 2.0,
                    velocity_tol: 0.05,
                    pitch_tol: 1.0_f64.to_radians(),
                }),
                ..Thresholds::default()
            },
            ..Self::default()
        }
    }
}
