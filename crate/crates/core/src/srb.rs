//! Single-rigid-body plant: X-Y-Z Euler kinematics, Newton-Euler dynamics
//! driven by per-foot ground reaction forces, and a fixed-step RK4 integrator
//! with zero-order-hold inputs.
//!
//! Frames: positions and linear velocities are world-frame; angular velocity,
//! foot forces, and lever arms are body-frame. The rotation matrix maps body
//! to world.

use nalgebra::{Matrix3, SVector, Vector3};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 12;
pub const NUM_LEGS: usize = 4;

/// Integration rejects states with |pitch| at or beyond this bound; the
/// Euler-rate map loses rank at pi/2.
pub const PITCH_LIMIT: f64 = std::f64::consts::FRAC_PI_2 - 1e-3;

/// Any state component beyond this magnitude is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub type StateVector = SVector<f64, STATE_DIM>;

/// Legs are indexed front-right, front-left, rear-right, rear-left.
pub const LEG_NAMES: [&str; NUM_LEGS] = ["fr", "fl", "rr", "rl"];

/// Torso pose and twist. Orientation is X-Y-Z Euler angles (roll, pitch, yaw)
/// composing as R = Rx(roll) * Ry(pitch) * Rz(yaw).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidBodyState {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl RigidBodyState {
    pub fn new(
        position: Vector3<f64>,
        orientation: Vector3<f64>,
        linear_velocity: Vector3<f64>,
        angular_velocity: Vector3<f64>,
    ) -> Self {
        Self {
            position,
            orientation,
            linear_velocity,
            angular_velocity,
        }
    }

    pub fn zeros() -> Self {
        Self::new(
            Vector3::zeros(),
            Vector3::zeros(),
            Vector3::zeros(),
            Vector3::zeros(),
        )
    }

    /// Stacks [position, orientation, linear velocity, angular velocity].
    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<3>(3).copy_from(&self.orientation);
        v.fixed_rows_mut::<3>(6).copy_from(&self.linear_velocity);
        v.fixed_rows_mut::<3>(9).copy_from(&self.angular_velocity);
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self::new(
            v.fixed_rows::<3>(0).into(),
            v.fixed_rows::<3>(3).into(),
            v.fixed_rows::<3>(6).into(),
            v.fixed_rows::<3>(9).into(),
        )
    }

    pub fn roll(&self) -> f64 {
        self.orientation.x
    }

    pub fn pitch(&self) -> f64 {
        self.orientation.y
    }

    pub fn yaw(&self) -> f64 {
        self.orientation.z
    }
}

/// Inertial parameters of the lumped body. Leg mass is folded into the torso;
/// swing dynamics do not act back on the trunk.
#[derive(Clone, Copy, Debug)]
pub struct ModelParams {
    /// Total mass, torso plus all four legs (kg).
    pub mass: f64,
    /// Body-frame rotational inertia about the CoM (kg m^2).
    pub inertia: Matrix3<f64>,
    /// Gravitational acceleration, world frame (m/s^2); enters additively.
    pub gravity: Vector3<f64>,
}

impl ModelParams {
    pub fn new(mass: f64, inertia: Matrix3<f64>, gravity: Vector3<f64>) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::InvalidConfig {
                detail: format!("mass must be positive and finite, got {mass}"),
            });
        }
        if inertia.iter().any(|v| !v.is_finite()) || gravity.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "model parameters",
            });
        }
        if (inertia - inertia.transpose()).amax() > 1e-12 * (1.0 + inertia.amax()) {
            return Err(Error::InvalidConfig {
                detail: "inertia must be symmetric".into(),
            });
        }
        if inertia.cholesky().is_none() {
            return Err(Error::InvalidConfig {
                detail: "inertia must be positive definite".into(),
            });
        }
        Ok(Self {
            mass,
            inertia,
            gravity,
        })
    }

    /// 12.75 kg trunk-plus-legs lump with a desk-scale inertia tensor.
    pub fn default_quadruped() -> Self {
        Self::new(
            12.75,
            Matrix3::from_diagonal(&Vector3::new(0.1, 0.25, 0.3)),
            Vector3::new(0.0, 0.0, -9.81),
        )
        .expect("default parameters are valid")
    }

    /// Weight magnitude m*|g| (N), the natural scale for foot forces.
    pub fn weight(&self) -> f64 {
        self.mass * self.gravity.norm()
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::default_quadruped()
    }
}

/// Per-foot ground reaction forces with their application points. Forces and
/// lever arms are body-frame; lever arms run from the CoM to the foot.
#[derive(Clone, Copy, Debug)]
pub struct ControlInput {
    pub forces: [Vector3<f64>; NUM_LEGS],
    pub foot_offsets: [Vector3<f64>; NUM_LEGS],
    pub stance: [bool; NUM_LEGS],
}

impl ControlInput {
    pub fn new(
        forces: [Vector3<f64>; NUM_LEGS],
        foot_offsets: [Vector3<f64>; NUM_LEGS],
        stance: [bool; NUM_LEGS],
    ) -> Self {
        Self {
            forces,
            foot_offsets,
            stance,
        }
    }

    /// No contact anywhere: free flight.
    pub fn coast() -> Self {
        Self {
            forces: [Vector3::zeros(); NUM_LEGS],
            foot_offsets: [Vector3::zeros(); NUM_LEGS],
            stance: [false; NUM_LEGS],
        }
    }

    fn is_finite(&self) -> bool {
        self.forces
            .iter()
            .chain(self.foot_offsets.iter())
            .all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite())
    }
}

/// R = Rx(roll) * Ry(pitch) * Rz(yaw), body to world.
pub fn rotation_from_euler(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = euler.x.sin_cos();
    let (sp, cp) = euler.y.sin_cos();
    let (sy, cy) = euler.z.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Inverse of `rotation_from_euler`: recovers the X-Y-Z angles from a
/// rotation matrix. Pitch is taken in (-pi/2, pi/2); at the gimbal lock
/// boundary the split between roll and yaw is conventional (yaw = 0).
pub fn euler_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let sp = r[(0, 2)].clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if 1.0 - sp.abs() < 1e-12 {
        return Vector3::new(r[(2, 1)].atan2(r[(1, 1)]), pitch, 0.0);
    }
    let roll = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let yaw = (-r[(0, 1)]).atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// Maps body-frame angular velocity to X-Y-Z Euler angle rates:
/// Theta_dot = euler_rate_matrix(pitch, yaw) * Omega. Singular at
/// |pitch| = pi/2; callers guard with PITCH_LIMIT.
pub fn euler_rate_matrix(pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy / cp,
        -sy / cp,
        0.0,
        sy,
        cy,
        0.0,
        -cy * sp / cp,
        sy * sp / cp,
        1.0,
    )
}

fn validate_state(x: &RigidBodyState) -> Result<()> {
    let v = x.to_vector();
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: "rigid body state",
        });
    }
    let magnitude = v.amax();
    if magnitude > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { magnitude });
    }
    if x.pitch().abs() >= PITCH_LIMIT {
        return Err(Error::SingularOrientation { pitch: x.pitch() });
    }
    Ok(())
}

/// Continuous-time state derivative. Swing-leg force entries are masked out
/// by the stance flags before use. The gyroscopic term enters with the
/// standard Euler-equation sign, -Omega x (I Omega), which is what conserves
/// world-frame angular momentum and kinetic energy in free rotation.
pub fn dynamics(x: &RigidBodyState, u: &ControlInput, params: &ModelParams) -> Result<StateVector> {
    validate_state(x)?;
    if !u.is_finite() {
        return Err(Error::NonFinite {
            context: "control input",
        });
    }

    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for leg in 0..NUM_LEGS {
        if u.stance[leg] {
            force += u.forces[leg];
            torque += u.foot_offsets[leg].cross(&u.forces[leg]);
        }
    }

    let r = rotation_from_euler(&x.orientation);
    let omega = x.angular_velocity;
    let theta_dot = euler_rate_matrix(x.pitch(), x.yaw()) * omega;
    let accel = r * force / params.mass + params.gravity;
    let inertia_inv = params
        .inertia
        .try_inverse()
        .ok_or(Error::InvalidConfig {
            detail: "inertia not invertible".into(),
        })?;
    let omega_dot = inertia_inv * (torque - omega.cross(&(params.inertia * omega)));

    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&x.linear_velocity);
    dx.fixed_rows_mut::<3>(3).copy_from(&theta_dot);
    dx.fixed_rows_mut::<3>(6).copy_from(&accel);
    dx.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(dx)
}

/// One classical Runge-Kutta step with the input held constant across the
/// step. Errors instead of returning garbage when the state leaves the valid
/// region (pitch guard or divergence limit).
pub fn rk4_step(
    x: &RigidBodyState,
    u: &ControlInput,
    params: &ModelParams,
    dt: f64,
) -> Result<RigidBodyState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidConfig {
            detail: format!("step size must be positive, got {dt}"),
        });
    }
    let xv = x.to_vector();
    let k1 = dynamics(x, u, params)?;
    let k2 = dynamics(&RigidBodyState::from_vector(&(xv + 0.5 * dt * k1)), u, params)?;
    let k3 = dynamics(&RigidBodyState::from_vector(&(xv + 0.5 * dt * k2)), u, params)?;
    let k4 = dynamics(&RigidBodyState::from_vector(&(xv + dt * k3)), u, params)?;
    let next = RigidBodyState::from_vector(&(xv + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)));
    validate_state(&next)?;
    Ok(next)
}

/// Integrates a control tape with zero-order hold. Returns controls.len()+1
/// states including the initial one.
pub fn rollout(
    x0: &RigidBodyState,
    controls: &[ControlInput],
    params: &ModelParams,
    dt: f64,
) -> Result<Vec<RigidBodyState>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    validate_state(x0)?;
    states.push(*x0);
    let mut x = *x0;
    for u in controls {
        x = rk4_step(&x, u, params, dt)?;
        states.push(x);
    }
    Ok(states)
}
