//! Trot scheduling, swing trajectories, and the 3-DOF leg kinematics that
//! map body-frame foot forces to joint torques.
//!
//! Leg chain (per leg, hip frame): hip roll q1 about x, hip pitch q2 about
//! y, knee q3 about y, two equal links hanging down. Positive q3 folds the
//! knee backward; straight down is q = (0, 0, 0) with the foot at
//! (0, 0, -(l1+l2)).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::srb::NUM_LEGS;

/// Per-joint torque limit, Nm.
pub const TORQUE_LIMIT: f64 = 33.5;

/// Link lengths and hip mount points (body frame). Legs are indexed
/// FR, FL, RR, RL to match the force layout everywhere else.
#[derive(Clone, Copy, Debug)]
pub struct LegGeometry {
    pub l1: f64,
    pub l2: f64,
    pub hip_offsets: [Vector3<f64>; NUM_LEGS],
}

impl Default for LegGeometry {
    fn default() -> Self {
        Self {
            l1: 0.2,
            l2: 0.2,
            hip_offsets: [
                Vector3::new(0.19, -0.13, 0.0),
                Vector3::new(0.19, 0.13, 0.0),
                Vector3::new(-0.19, -0.13, 0.0),
                Vector3::new(-0.19, 0.13, 0.0),
            ],
        }
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Foot position in the hip frame.
pub fn forward_kinematics(geom: &LegGeometry, q: &Vector3<f64>) -> Vector3<f64> {
    let (s2, c2) = q.y.sin_cos();
    let (s23, c23) = (q.y + q.z).sin_cos();
    let planar = Vector3::new(
        -geom.l1 * s2 - geom.l2 * s23,
        0.0,
        -geom.l1 * c2 - geom.l2 * c23,
    );
    rot_x(q.x) * planar
}

/// Joint angles reaching a hip-frame target, knee folded backward
/// (q3 >= 0). Fails when the target leaves the reachable annulus.
pub fn inverse_kinematics(geom: &LegGeometry, p: &Vector3<f64>) -> Result<Vector3<f64>> {
    let r = p.norm();
    let q1 = p.y.atan2(-p.z);
    let pl = rot_x(-q1) * p;

    let d = (r * r - geom.l1 * geom.l1 - geom.l2 * geom.l2) / (2.0 * geom.l1 * geom.l2);
    if !(-1.0..=1.0).contains(&d) || !d.is_finite() {
        return Err(Error::OutOfWorkspace { radius: r });
    }
    let q3 = d.acos();

    let u = -pl.x;
    let v = -pl.z;
    let k1 = geom.l1 + geom.l2 * q3.cos();
    let k2 = geom.l2 * q3.sin();
    let q2 = u.atan2(v) - k2.atan2(k1);
    Ok(Vector3::new(q1, q2, q3))
}

/// Foot-velocity Jacobian in the hip frame: columns are dp/dq.
pub fn jacobian(geom: &LegGeometry, q: &Vector3<f64>) -> Matrix3<f64> {
    let p = forward_kinematics(geom, q);
    // d/dq1 of Rx(q1) v = x_hat cross p.
    let col1 = Vector3::new(0.0, -p.z, p.y);

    let (s2, c2) = q.y.sin_cos();
    let (s23, c23) = (q.y + q.z).sin_cos();
    let rx = rot_x(q.x);
    let col2 = rx * Vector3::new(
        -geom.l1 * c2 - geom.l2 * c23,
        0.0,
        geom.l1 * s2 + geom.l2 * s23,
    );
    let col3 = rx * Vector3::new(-geom.l2 * c23, 0.0, geom.l2 * s23);
    Matrix3::from_columns(&[col1, col2, col3])
}

/// Joint torques with the shared limit applied and a flag when any joint
/// hit it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorqueCommand {
    pub torque: Vector3<f64>,
    pub saturated: bool,
}

fn clamp_torque(raw: Vector3<f64>) -> TorqueCommand {
    let clamped = raw.map(|t| t.clamp(-TORQUE_LIMIT, TORQUE_LIMIT));
    TorqueCommand {
        torque: clamped,
        saturated: clamped != raw,
    }
}

/// Torques that make the foot exert the reaction `force` on the body
/// (body/hip frame, so `force` is what the controller commanded for this
/// foot). The foot pushes the ground with -force, hence the sign.
pub fn stance_torques(geom: &LegGeometry, q: &Vector3<f64>, force: &Vector3<f64>) -> TorqueCommand {
    clamp_torque(jacobian(geom, q).transpose() * -force)
}

#[derive(Clone, Copy, Debug)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 20.0, kd: 0.5 }
    }
}

/// Joint-space PD for a swinging leg.
pub fn swing_torques(
    gains: &PdGains,
    q: &Vector3<f64>,
    qd: &Vector3<f64>,
    q_des: &Vector3<f64>,
    qd_des: &Vector3<f64>,
) -> TorqueCommand {
    clamp_torque(-gains.kp * (q - q_des) - gains.kd * (qd - qd_des))
}

/// Two-beat trot: diagonal pair FR+RL alternates with FL+RR every phase.
/// Even phase index puts FR+RL in stance.
#[derive(Clone, Copy, Debug)]
pub struct TrotFsm {
    pub phase_duration: f64,
}

impl Default for TrotFsm {
    fn default() -> Self {
        Self {
            phase_duration: 0.2,
        }
    }
}

impl TrotFsm {
    pub fn new(phase_duration: f64) -> Result<Self> {
        if !(phase_duration.is_finite() && phase_duration > 0.0) {
            return Err(Error::InvalidConfig {
                detail: format!("phase duration must be positive, got {phase_duration}"),
            });
        }
        Ok(Self { phase_duration })
    }

    pub fn phase_index(&self, t: f64) -> u64 {
        (t / self.phase_duration).floor().max(0.0) as u64
    }

    /// Fraction through the current phase, in [0, 1).
    pub fn phase_fraction(&self, t: f64) -> f64 {
        let f = (t / self.phase_duration).rem_euclid(1.0);
        if f.is_finite() {
            f
        } else {
            0.0
        }
    }

    pub fn stance_at(&self, t: f64) -> [bool; NUM_LEGS] {
        if self.phase_index(t) % 2 == 0 {
            [true, false, false, true]
        } else {
            [false, true, true, false]
        }
    }

    /// Contact schedule for each of `steps` model steps starting at `t`.
    pub fn stance_horizon(&self, t: f64, steps: usize, dt: f64) -> Vec<[bool; NUM_LEGS]> {
        (0..steps).map(|i| self.stance_at(t + i as f64 * dt)).collect()
    }

    /// Time remaining until the current phase ends.
    pub fn time_to_switch(&self, t: f64) -> f64 {
        (1.0 - self.phase_fraction(t)) * self.phase_duration
    }
}

/// Swing foot path from `start` to `end`, parametrized by phase fraction
/// s in [0, 1]. Returns position and d(position)/ds; divide by the swing
/// duration for velocity in time. Horizontal motion follows a cycloid
/// (zero endpoint velocity); height blends through an apex `clearance`
/// above the higher endpoint with zero vertical velocity at both ends and
/// at the apex.
pub fn swing_position(
    start: &Vector3<f64>,
    end: &Vector3<f64>,
    clearance: f64,
    s: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let s = s.clamp(0.0, 1.0);
    let two_pi = std::f64::consts::TAU;
    let sigma = s - (two_pi * s).sin() / two_pi;
    let dsigma = 1.0 - (two_pi * s).cos();

    let mut pos = start + (end - start) * sigma;
    let mut vel = (end - start) * dsigma;

    let apex = start.z.max(end.z) + clearance;
    let bump = (1.0 - (two_pi * s).cos()) / 2.0;
    let dbump = std::f64::consts::PI * (two_pi * s).sin();
    // Anchor on the takeoff height rising, on the landing height falling;
    // both halves meet at the apex where the blend hits 1.
    let anchor = if s <= 0.5 { start.z } else { end.z };
    pos.z = anchor + (apex - anchor) * bump;
    vel.z = (apex - anchor) * dbump;
    (pos, vel)
}

/// Touchdown target on the ground plane: half a stance ahead of the hip
/// plus a velocity-error correction.
pub fn raibert_touchdown(
    hip_on_ground: &Vector3<f64>,
    velocity: &Vector3<f64>,
    desired_velocity: &Vector3<f64>,
    stance_duration: f64,
    gain: f64,
) -> Vector3<f64> {
    let mut p = hip_on_ground
        + velocity * (stance_duration / 2.0)
        + (velocity - desired_velocity) * gain;
    p.z = 0.0;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> LegGeometry {
        LegGeometry::default()
    }

    #[test]
    fn forward_kinematics_known_poses() {
        let g = geom();
        // Straight down.
        let p = forward_kinematics(&g, &Vector3::zeros());
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, -0.4), epsilon = 1e-12);
        // Knee bent a right angle.
        let p = forward_kinematics(&g, &Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(p, Vector3::new(-0.2, 0.0, -0.2), epsilon = 1e-12);
        // Hip roll swings the foot sideways.
        let p = forward_kinematics(&g, &Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        assert_relative_eq!(p, Vector3::new(0.0, 0.4, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn ik_round_trips_fk_over_the_workspace() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 500 {
            let p = Vector3::new(
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.39..-0.05),
            );
            let r = p.norm();
            if r > 0.38 || r < 0.05 {
                continue;
            }
            let q = inverse_kinematics(&g, &p).unwrap();
            let back = forward_kinematics(&g, &q);
            assert_relative_eq!(back, p, epsilon = 1e-9);
            assert!(q.z >= 0.0, "knee direction flipped: {}", q.z);
            checked += 1;
        }
    }

    #[test]
    fn out_of_reach_targets_are_rejected() {
        let g = geom();
        assert!(matches!(
            inverse_kinematics(&g, &Vector3::new(0.0, 0.0, -0.5)),
            Err(Error::OutOfWorkspace { .. })
        ));
        assert!(matches!(
            inverse_kinematics(&g, &Vector3::new(0.45, 0.0, -0.05)),
            Err(Error::OutOfWorkspace { .. })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-7;
        for _ in 0..200 {
            let q = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(0.2..2.4),
            );
            let j = jacobian(&g, &q);
            for col in 0..3 {
                let mut qp = q;
                let mut qm = q;
                qp[col] += eps;
                qm[col] -= eps;
                let fd = (forward_kinematics(&g, &qp) - forward_kinematics(&g, &qm)) / (2.0 * eps);
                assert_relative_eq!(j.column(col).into_owned(), fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn stance_torques_clamp_and_flag() {
        let g = geom();
        let q = inverse_kinematics(&g, &Vector3::new(0.0, 0.0, -0.3)).unwrap();
        let tame = stance_torques(&g, &q, &Vector3::new(0.0, 0.0, 30.0));
        assert!(!tame.saturated);
        assert!(tame.torque.amax() <= TORQUE_LIMIT);
        let wild = stance_torques(&g, &q, &Vector3::new(0.0, 0.0, 2000.0));
        assert!(wild.saturated);
        assert!(wild.torque.amax() <= TORQUE_LIMIT);
    }

    #[test]
    fn holding_weight_loads_the_knee() {
        // Supporting an upward reaction takes a positive knee torque at the
        // crouched pose; direction fixed by the virtual-work sign.
        let g = geom();
        let q = inverse_kinematics(&g, &Vector3::new(0.0, 0.0, -0.3)).unwrap();
        let cmd = stance_torques(&g, &q, &Vector3::new(0.0, 0.0, 31.0));
        assert!(cmd.torque.z != 0.0);
        assert!(!cmd.saturated);
    }

    #[test]
    fn swing_pd_drives_toward_target() {
        let gains = PdGains::default();
        let q = Vector3::new(0.1, 0.0, 1.0);
        let q_des = Vector3::new(0.0, 0.0, 1.0);
        let cmd = swing_torques(&gains, &q, &Vector3::zeros(), &q_des, &Vector3::zeros());
        assert!(cmd.torque.x < 0.0);
        assert_relative_eq!(cmd.torque.x, -2.0, epsilon = 1e-12);
        assert!(!cmd.saturated);
    }

    #[test]
    fn trot_alternates_diagonals() {
        let fsm = TrotFsm::default();
        assert_eq!(fsm.stance_at(0.0), [true, false, false, true]);
        assert_eq!(fsm.stance_at(0.19), [true, false, false, true]);
        assert_eq!(fsm.stance_at(0.2), [false, true, true, false]);
        assert_eq!(fsm.stance_at(0.41), [true, false, false, true]);
        // Every leg is in stance exactly half the time.
        let horizon = fsm.stance_horizon(0.0, 400, 1e-3);
        for leg in 0..NUM_LEGS {
            let count = horizon.iter().filter(|s| s[leg]).count();
            assert_eq!(count, 200);
        }
    }

    #[test]
    fn phase_bookkeeping() {
        let fsm = TrotFsm::default();
        assert_eq!(fsm.phase_index(0.0), 0);
        assert_eq!(fsm.phase_index(0.39), 1);
        assert_relative_eq!(fsm.phase_fraction(0.25), 0.25, epsilon = 1e-12);
        assert_relative_eq!(fsm.time_to_switch(0.25), 0.15, epsilon = 1e-12);
        assert!(TrotFsm::new(0.0).is_err());
    }

    #[test]
    fn swing_path_endpoints_and_apex() {
        let start = Vector3::new(0.0, 0.1, 0.0);
        let end = Vector3::new(0.1, 0.1, 0.02);
        let h = 0.05;
        let (p0, v0) = swing_position(&start, &end, h, 0.0);
        let (p1, v1) = swing_position(&start, &end, h, 1.0);
        let (pa, va) = swing_position(&start, &end, h, 0.5);
        assert_relative_eq!(p0, start, epsilon = 1e-12);
        assert_relative_eq!(p1, end, epsilon = 1e-12);
        assert_relative_eq!(v0.norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!(v1.norm(), 0.0, epsilon = 1e-9);
        // Apex clears the higher endpoint by the clearance.
        assert_relative_eq!(pa.z, end.z + h, epsilon = 1e-12);
        assert_relative_eq!(va.z, 0.0, epsilon = 1e-9);
        // Height never dips below the lower endpoint.
        for i in 0..=100 {
            let s = i as f64 / 100.0;
            let (p, _) = swing_position(&start, &end, h, s);
            assert!(p.z >= start.z.min(end.z) - 1e-12);
            assert!(p.z <= end.z + h + 1e-12);
        }
    }

    #[test]
    fn raibert_target_shifts_with_velocity_error() {
        let hip = Vector3::new(0.19, -0.13, 0.0);
        let v = Vector3::new(0.3, 0.0, 0.0);
        let vd = Vector3::new(0.2, 0.0, 0.0);
        let p = raibert_touchdown(&hip, &v, &vd, 0.2, 0.03);
        assert_relative_eq!(p.x, 0.19 + 0.03 + 0.003, epsilon = 1e-12);
        assert_eq!(p.z, 0.0);
    }
}
