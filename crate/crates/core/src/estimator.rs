//! Body linear-velocity filter: integrate the accelerometer between control
//! ticks, correct with leg-odometry velocity fixes from whichever feet are
//! on the ground. Covariance is a full 3x3 so repeated one-leg updates
//! shrink uncertainty anisotropically.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Smallest covariance eigenvalue kept after an update; prevents a
/// zero-noise configuration from freezing the filter.
const COVARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct EstimatorConfig {
    /// Accelerometer noise density folded into the prediction step, m/s^2.
    pub accel_noise: f64,
    /// Per-leg velocity fix noise, m/s.
    pub leg_noise: f64,
    /// Variance on each axis of the initial velocity. Small when the start
    /// state is known (booting at rest with feet planted), larger for a
    /// generic prior.
    pub initial_variance: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            accel_noise: 0.1,
            leg_noise: 0.05,
            initial_variance: 1e-2,
        }
    }
}

impl EstimatorConfig {
    fn validate(&self) -> Result<()> {
        if self.accel_noise < 0.0 || self.leg_noise < 0.0 || self.initial_variance < 0.0 {
            return Err(Error::InvalidConfig {
                detail: "estimator noise levels must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// World-frame velocity a stationary foot implies: the body must move
/// opposite the foot's body-frame motion. `foot_velocity_body` is the leg's
/// own foot velocity (J qdot), `foot_offset_body` the foot position relative
/// to the center of mass.
pub fn leg_velocity_measurement(
    rotation: &Matrix3<f64>,
    omega: &Vector3<f64>,
    foot_offset_body: &Vector3<f64>,
    foot_velocity_body: &Vector3<f64>,
) -> Vector3<f64> {
    -(rotation * (foot_velocity_body + omega.cross(foot_offset_body)))
}

#[derive(Clone, Debug)]
pub struct VelocityEstimator {
    cfg: EstimatorConfig,
    velocity: Vector3<f64>,
    covariance: Matrix3<f64>,
}

impl VelocityEstimator {
    pub fn new(cfg: EstimatorConfig, initial_velocity: Vector3<f64>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: initial_velocity,
            covariance: Matrix3::identity() * cfg.initial_variance,
        })
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.velocity
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        self.covariance
    }

    /// Dead-reckons one step from body-frame specific force: the world
    /// acceleration is R a + g.
    pub fn predict(
        &mut self,
        specific_force_body: &Vector3<f64>,
        rotation: &Matrix3<f64>,
        gravity: &Vector3<f64>,
        dt: f64,
    ) {
        self.velocity += (rotation * specific_force_body + gravity) * dt;
        let q = self.cfg.accel_noise * dt;
        self.covariance += Matrix3::identity() * (q * q);
    }

    /// Folds in one leg's velocity fix. Call once per stance leg, in leg
    /// order, so runs are reproducible.
    pub fn update(&mut self, measurement: &Vector3<f64>) {
        let r = self.cfg.leg_noise * self.cfg.leg_noise;
        let innovation_cov = self.covariance + Matrix3::identity() * r;
        let gain = self.covariance
            * innovation_cov
                .try_inverse()
                .unwrap_or_else(Matrix3::identity);
        self.velocity += gain * (measurement - self.velocity);
        self.covariance = (Matrix3::identity() - gain) * self.covariance;
        self.condition_covariance();
    }

    /// Symmetrize and floor the eigenvalues; textbook update forms drift
    /// asymmetric and can collapse to exactly singular.
    fn condition_covariance(&mut self) {
        let sym = (self.covariance + self.covariance.transpose()) * 0.5;
        let mut eig = sym.symmetric_eigen();
        for v in eig.eigenvalues.iter_mut() {
            *v = v.max(COVARIANCE_FLOOR);
        }
        self.covariance = eig.recompose();
    }
}
