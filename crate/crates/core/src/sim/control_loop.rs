//! Closed-loop batch simulation: the rigid-body plant stepped at the model
//! rate, the force planner every `CONTROL_PERIOD` steps, and the trot state
//! machine on its own phase clock. One run is driven entirely by an
//! `ExperimentConfig` plus an identified model and is bit-reproducible for
//! a fixed seed (solver wall times aside).
//!
//! The planner always works in a yaw-aligned frame anchored under the body:
//! each tick the world state and references are rotated by the inverse of
//! the current yaw about the body's ground projection. The plant is
//! equivariant under that rotation and commanded forces are body-frame, so
//! the transform is exact; its point is to keep the model's inputs inside
//! the neighborhood it was identified on no matter how far the robot walks
//! or turns.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::estimator::{leg_velocity_measurement, EstimatorConfig, VelocityEstimator};
use crate::gait::{
    inverse_kinematics, jacobian, raibert_touchdown, stance_torques, swing_position, LegGeometry,
    TrotFsm,
};
use crate::koopman::KoopmanModel;
use crate::mpc::{MpcConfig, MpcController};
use crate::sim::config::{Disturbance, ExperimentConfig, GaitMode};
use crate::sim::log::{LogRow, RunLog};
use crate::srb::{
    rk4_step, rotation_from_euler, ControlInput, ModelParams, RigidBodyState, NUM_LEGS, STATE_DIM,
};

/// Model steps between planner ticks.
pub const CONTROL_PERIOD: usize = 5;

/// Body height below which the run is declared over; the kinematic stance
/// model is meaningless with the torso at the ground.
const HEIGHT_FLOOR: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: RunLog,
    pub final_state: RigidBodyState,
    /// Why the run ended early, if it did. A completed run is None even if
    /// tracking was poor; quality is judged from the log.
    pub failure: Option<String>,
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Pulls a hip-frame foot target into the leg's reachable annulus.
fn clamp_reach(geom: &LegGeometry, target: Vector3<f64>) -> Vector3<f64> {
    let max_r = geom.l1 + geom.l2 - 1e-4;
    let min_r = (geom.l1 - geom.l2).abs() + 1e-4;
    let r = target.norm();
    if r < min_r {
        return Vector3::new(0.0, 0.0, -min_r.max(1e-3));
    }
    if r > max_r {
        return target * (max_r / r);
    }
    target
}

struct LoopState<'a> {
    cfg: &'a ExperimentConfig,
    params: ModelParams,
    geom: LegGeometry,
    fsm: TrotFsm,
    mpc: MpcController,
    est: VelocityEstimator,
    rng: ChaCha8Rng,
    accel_noise: Normal<f64>,
    leg_noise: Normal<f64>,
    dt: f64,
    x: RigidBodyState,
    /// World-frame foot positions: anchors for stance legs, the commanded
    /// path point for swing legs.
    foot_world: [Vector3<f64>; NUM_LEGS],
    swing_start: [Vector3<f64>; NUM_LEGS],
    stance: [bool; NUM_LEGS],
    /// Forces actually applied to the plant this tick (after torque-limit
    /// derating), body frame.
    applied_forces: [Vector3<f64>; NUM_LEGS],
    applied_stance: [bool; NUM_LEGS],
    /// Integrated reference: world position and continuous yaw.
    p_ref: Vector3<f64>,
    yaw_ref: f64,
    /// World-frame acceleration equivalent of a velocity jump applied this
    /// step, so the accelerometer sees the shove like a real one.
    imu_kick: Vector3<f64>,
    log: RunLog,
}

impl LoopState<'_> {
    /// Half a model step: nudges phase and disturbance lookups off exact
    /// float boundaries so schedules are insensitive to time round-off.
    fn nudge(&self) -> f64 {
        0.5 * self.dt
    }

    fn stance_at(&self, t: f64) -> [bool; NUM_LEGS] {
        match self.cfg.gait {
            GaitMode::Stand => [true; NUM_LEGS],
            GaitMode::Trot => self.fsm.stance_at(t + self.nudge()),
        }
    }

    fn apply_due_disturbances(&mut self, t: f64, applied: &mut [bool]) {
        for (i, d) in self.cfg.disturbances.iter().enumerate() {
            if applied[i] || d.time() > t + self.nudge() {
                continue;
            }
            applied[i] = true;
            match *d {
                Disturbance::Push {
                    dv, dtheta, domega, ..
                } => {
                    let dv = Vector3::from(dv);
                    self.x.linear_velocity += dv;
                    self.x.orientation += Vector3::from(dtheta);
                    self.x.angular_velocity += Vector3::from(domega);
                    self.imu_kick += dv / self.dt;
                }
                Disturbance::FootSlip { leg, offset, .. } => {
                    let shift = Vector3::new(offset[0], offset[1], 0.0);
                    self.foot_world[leg] += shift;
                    self.swing_start[leg] += shift;
                }
            }
        }
    }

    /// Leg odometry updates for every planted foot, then the velocity the
    /// controller will use.
    fn sense_and_estimate(&mut self, r: &Matrix3<f64>) -> Vector3<f64> {
        for leg in 0..NUM_LEGS {
            if !self.stance[leg] {
                continue;
            }
            let r_body = r.transpose() * (self.foot_world[leg] - self.x.position);
            // A planted foot is still in the world; the body-frame foot
            // velocity the encoders imply follows from differentiating
            // R' (anchor - p).
            let truth = -self.x.angular_velocity.cross(&r_body)
                - r.transpose() * self.x.linear_velocity;
            let noisy = truth
                + Vector3::new(
                    self.leg_noise.sample(&mut self.rng),
                    self.leg_noise.sample(&mut self.rng),
                    self.leg_noise.sample(&mut self.rng),
                );
            let y = leg_velocity_measurement(r, &self.x.angular_velocity, &r_body, &noisy);
            self.est.update(&y);
        }
        if self.cfg.use_estimator {
            self.est.velocity()
        } else {
            self.x.linear_velocity
        }
    }

    /// Advances the command integrator one control tick and leashes it to
    /// the body so disturbances cannot bank unbounded position error.
    fn update_reference(&mut self, t: f64) {
        let cmd = self.cfg.command_at(t);
        let dt_ctrl = self.dt * CONTROL_PERIOD as f64;
        let v_world = rot_z(self.yaw_ref) * Vector3::new(cmd.vx, cmd.vy, 0.0);
        self.p_ref += v_world * dt_ctrl;
        self.p_ref.z = self.cfg.stand_height;
        self.yaw_ref += cmd.yaw_rate * dt_ctrl;

        let leash = self.cfg.reference_leash;
        let offset = Vector3::new(
            self.p_ref.x - self.x.position.x,
            self.p_ref.y - self.x.position.y,
            0.0,
        );
        let d = offset.norm();
        if d > leash {
            let clamped = offset * (leash / d);
            self.p_ref.x = self.x.position.x + clamped.x;
            self.p_ref.y = self.x.position.y + clamped.y;
        }
        let yaw_err = self.yaw_ref - self.x.orientation.z;
        if yaw_err.abs() > 0.5 {
            self.yaw_ref = self.x.orientation.z + yaw_err.clamp(-0.5, 0.5);
        }
    }

    /// Moves each airborne foot along its arc toward a touchdown point that
    /// keeps chasing the velocity target.
    fn update_swing_feet(&mut self, t: f64, r: &Matrix3<f64>, v_used: &Vector3<f64>) {
        if self.cfg.gait == GaitMode::Stand {
            return;
        }
        let s = self.fsm.phase_fraction(t + self.nudge());
        let cmd = self.cfg.command_at(t);
        let v_des = rot_z(self.yaw_ref) * Vector3::new(cmd.vx, cmd.vy, 0.0);
        for leg in 0..NUM_LEGS {
            if self.stance[leg] {
                continue;
            }
            let hip_w = self.x.position + r * self.geom.hip_offsets[leg];
            let hip_ground = Vector3::new(hip_w.x, hip_w.y, 0.0);
            let target = raibert_touchdown(
                &hip_ground,
                v_used,
                &v_des,
                self.cfg.phase_duration,
                self.cfg.raibert_gain,
            );
            let (mut pos, _) = swing_position(&self.swing_start[leg], &target, self.cfg.clearance, s);
            pos.z = pos.z.max(0.0);
            // Keep the commanded point reachable so IK stays solvable.
            let hip_frame = r.transpose() * (pos - self.x.position) - self.geom.hip_offsets[leg];
            let clamped = clamp_reach(&self.geom, hip_frame);
            self.foot_world[leg] = self.x.position + r * (self.geom.hip_offsets[leg] + clamped);
        }
    }

    /// World reference state i model steps ahead, yaw-aligned about the
    /// current body position, stacked for the planner.
    fn build_references(
        &self,
        t: f64,
        yaw0: f64,
        rz_neg: &Matrix3<f64>,
        anchor: &Vector3<f64>,
    ) -> Vec<nalgebra::SVector<f64, STATE_DIM>> {
        let cmd = self.cfg.command_at(t);
        let v_body = Vector3::new(cmd.vx, cmd.vy, 0.0);
        let k = self.mpc.config().horizon;
        let mut refs = Vec::with_capacity(k);
        let mut p = self.p_ref;
        let mut yaw = self.yaw_ref;
        for _ in 0..k {
            p += rot_z(yaw) * v_body * self.dt;
            yaw += cmd.yaw_rate * self.dt;
            let p_cf = rz_neg * (p - anchor);
            let v_cf = rz_neg * (rot_z(yaw) * v_body);
            let mut sv = nalgebra::SVector::<f64, STATE_DIM>::zeros();
            sv.fixed_rows_mut::<3>(0).copy_from(&p_cf);
            sv[5] = yaw - yaw0;
            sv.fixed_rows_mut::<3>(6).copy_from(&v_cf);
            sv[11] = cmd.yaw_rate;
            refs.push(sv);
        }
        refs
    }

    /// Maps a commanded body-frame foot force to clamped joint torques and
    /// the force those torques actually realize.
    fn map_torques(
        &self,
        leg: usize,
        r: &Matrix3<f64>,
        force: &Vector3<f64>,
    ) -> (Vector3<f64>, bool, Vector3<f64>) {
        let hip_frame =
            r.transpose() * (self.foot_world[leg] - self.x.position) - self.geom.hip_offsets[leg];
        let reachable = clamp_reach(&self.geom, hip_frame);
        let q = match inverse_kinematics(&self.geom, &reachable) {
            Ok(q) => q,
            // Unreachable even after clamping cannot happen inside the
            // annulus; pass the command through untouched if it somehow does.
            Err(_) => return (Vector3::zeros(), false, *force),
        };
        let tc = stance_torques(&self.geom, &q, force);
        if !tc.saturated {
            return (tc.torque, false, *force);
        }
        // Clamped torques deliver a different force; apply what the
        // hardware would, not what was asked.
        let jt = jacobian(&self.geom, &q).transpose();
        match jt.lu().solve(&tc.torque) {
            Some(neg_f) => (tc.torque, true, -neg_f),
            None => (tc.torque, true, *force),
        }
    }

    fn tick(&mut self, tick_index: u64, t: f64) -> Result<()> {
        // Phase transitions: record liftoff points, pin touchdowns to the
        // ground plane.
        let stance_now = self.stance_at(t);
        for leg in 0..NUM_LEGS {
            if self.stance[leg] && !stance_now[leg] {
                self.swing_start[leg] = self.foot_world[leg];
            }
            if !self.stance[leg] && stance_now[leg] {
                self.foot_world[leg].z = 0.0;
            }
        }
        self.stance = stance_now;

        let r = rotation_from_euler(&self.x.orientation);
        let v_used = self.sense_and_estimate(&r);
        self.update_reference(t);
        self.update_swing_feet(t, &r, &v_used);

        // Plan in the yaw-aligned frame anchored under the body.
        let yaw0 = self.x.orientation.z;
        let rz_neg = rot_z(-yaw0);
        let anchor = Vector3::new(self.x.position.x, self.x.position.y, 0.0);
        let state_cf = RigidBodyState::new(
            rz_neg * (self.x.position - anchor),
            crate::srb::euler_from_rotation(&(rz_neg * r)),
            rz_neg * v_used,
            self.x.angular_velocity,
        );
        let k = self.mpc.config().horizon;
        let schedule = match self.cfg.gait {
            GaitMode::Stand => vec![[true; NUM_LEGS]; k],
            GaitMode::Trot => self.fsm.stance_horizon(t + self.nudge(), k, self.dt),
        };
        let refs = self.build_references(t, yaw0, &rz_neg, &anchor);
        let out = self.mpc.control(&state_cf, &schedule, &refs)?;

        let mut torques = [0.0; 12];
        let mut saturated = [false; NUM_LEGS];
        let mut forces = [0.0; 12];
        for leg in 0..NUM_LEGS {
            let f = out.forces[leg];
            forces[3 * leg..3 * leg + 3].copy_from_slice(f.as_slice());
            if !self.stance[leg] {
                self.applied_forces[leg] = Vector3::zeros();
                continue;
            }
            let (tau, sat, applied) = self.map_torques(leg, &r, &f);
            torques[3 * leg..3 * leg + 3].copy_from_slice(tau.as_slice());
            saturated[leg] = sat;
            self.applied_forces[leg] = applied;
        }
        self.applied_stance = self.stance;

        let mut row = LogRow {
            tick: tick_index,
            t,
            state: [0.0; STATE_DIM],
            vhat: [0.0; 3],
            reference: [0.0; STATE_DIM],
            forces,
            torques,
            stance: self.stance,
            saturated,
            qp_iterations: out.iterations as u64,
            qp_status: out.status,
            qp_degraded: out.degraded,
            qp_stationarity: out.certificate.stationarity,
            qp_feasibility: out.certificate.feasibility,
            qp_solve_s: out.solve_time.as_secs_f64(),
        };
        row.state.copy_from_slice(self.x.to_vector().as_slice());
        row.vhat.copy_from_slice(self.est.velocity().as_slice());
        let cmd = self.cfg.command_at(t);
        let v_ref_world = rot_z(self.yaw_ref) * Vector3::new(cmd.vx, cmd.vy, 0.0);
        row.reference[..3].copy_from_slice(self.p_ref.as_slice());
        row.reference[5] = self.yaw_ref;
        row.reference[6..9].copy_from_slice(v_ref_world.as_slice());
        row.reference[11] = cmd.yaw_rate;
        self.log.rows.push(row);
        Ok(())
    }

    fn substep(&mut self) -> Result<()> {
        let r = rotation_from_euler(&self.x.orientation);
        let mut offsets = [Vector3::zeros(); NUM_LEGS];
        for leg in 0..NUM_LEGS {
            offsets[leg] = r.transpose() * (self.foot_world[leg] - self.x.position);
        }
        let u = ControlInput::new(self.applied_forces, offsets, self.applied_stance);
        self.x = rk4_step(&self.x, &u, &self.params, self.dt)?;

        // The accelerometer sees the specific force the contacts (and any
        // shove) produced this step.
        let mut total = Vector3::zeros();
        for leg in 0..NUM_LEGS {
            if self.applied_stance[leg] {
                total += self.applied_forces[leg];
            }
        }
        let spec = total / self.params.mass
            + r.transpose() * self.imu_kick
            + Vector3::new(
                self.accel_noise.sample(&mut self.rng),
                self.accel_noise.sample(&mut self.rng),
                self.accel_noise.sample(&mut self.rng),
            );
        self.imu_kick = Vector3::zeros();
        self.est.predict(&spec, &r, &self.params.gravity, self.dt);
        Ok(())
    }
}

/// Runs one experiment to completion (or failure) and returns the log.
/// `model` must be identified at the rate this loop steps the plant; its
/// `dt` becomes the substep size.
pub fn run_experiment(cfg: &ExperimentConfig, model: &KoopmanModel) -> Result<RunOutput> {
    cfg.validate()?;
    model.validate()?;
    let dt = model.dt;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidConfig {
            detail: format!("model step size must be positive, got {dt}"),
        });
    }

    let params = cfg.plant.to_params()?;
    let geom = LegGeometry::default();
    let mpc_cfg = MpcConfig {
        horizon: cfg.mpc_horizon,
        control_period: CONTROL_PERIOD.min(cfg.mpc_horizon),
        friction: cfg.friction,
        fz_min: cfg.fz_min,
        fz_max: cfg.fz_max,
        ..MpcConfig::default()
    };
    let mpc = MpcController::new(model.clone(), mpc_cfg)?;

    let x = RigidBodyState::new(
        Vector3::new(0.0, 0.0, cfg.stand_height),
        Vector3::zeros(),
        Vector3::zeros(),
        Vector3::zeros(),
    );
    let mut foot_world = [Vector3::zeros(); NUM_LEGS];
    for leg in 0..NUM_LEGS {
        let hip = geom.hip_offsets[leg];
        foot_world[leg] = Vector3::new(hip.x, hip.y, 0.0);
    }

    let est_cfg = EstimatorConfig {
        accel_noise: cfg.noise.accel,
        leg_noise: cfg.noise.leg_velocity,
        // Runs boot standing still with feet planted; the initial velocity
        // is genuinely known.
        initial_variance: 1e-4,
    };
    let noise_err = |what: &str| Error::InvalidConfig {
        detail: format!("bad {what} noise level"),
    };
    let mut s = LoopState {
        cfg,
        params,
        geom,
        fsm: TrotFsm::new(cfg.phase_duration)?,
        mpc,
        est: VelocityEstimator::new(est_cfg, x.linear_velocity)?,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        accel_noise: Normal::new(0.0, cfg.noise.accel).map_err(|_| noise_err("accelerometer"))?,
        leg_noise: Normal::new(0.0, cfg.noise.leg_velocity).map_err(|_| noise_err("leg odometry"))?,
        dt,
        x,
        foot_world,
        swing_start: foot_world,
        stance: [true; NUM_LEGS],
        applied_forces: [Vector3::zeros(); NUM_LEGS],
        applied_stance: [true; NUM_LEGS],
        p_ref: x.position,
        yaw_ref: 0.0,
        imu_kick: Vector3::zeros(),
        log: RunLog::default(),
    };

    let n_substeps = ((cfg.duration / dt).round() as u64).max(1);
    let mut applied = vec![false; cfg.disturbances.len()];
    let mut failure = None;

    for n in 0..n_substeps {
        let t = n as f64 * dt;
        s.apply_due_disturbances(t, &mut applied);
        if n % CONTROL_PERIOD as u64 == 0 {
            if let Err(e) = s.tick(n / CONTROL_PERIOD as u64, t) {
                failure = Some(format!("control tick at t={t:.3}s failed: {e}"));
                break;
            }
        }
        if let Err(e) = s.substep() {
            failure = Some(format!("plant step at t={t:.3}s failed: {e}"));
            break;
        }
        if s.x.position.z < HEIGHT_FLOOR {
            failure = Some(format!("body reached the ground plane at t={t:.3}s"));
            break;
        }
    }

    Ok(RunOutput {
        log: s.log,
        final_state: s.x,
        failure,
    })
}
