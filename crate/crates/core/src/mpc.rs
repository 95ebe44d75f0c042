//! Predictive force controller on the lifted linear model. The model is
//! condensed over a short horizon into a dense QP whose decision variables
//! are one force vector per control period: the loop holds each commanded
//! force for a full period, so the optimizer must score that same held
//! input rather than a finer per-step sequence it would never get to
//! apply. (Planning per model step here is actively unstable: the plan
//! leans on one-step corrections, and holding the first of them for a
//! whole period overshoots on the fast rotational axes.) Cost Hessian and
//! constraint matrix depend only on the model and config, so they are
//! built once, and each tick only refreshes the linear cost, the box
//! bounds for the current stance schedule, and the warm start.
//!
//! Constraint layout per force block (friction > 0): 12 box rows (3 force
//! components x 4 feet, swing feet pinned with lo == hi == 0), then 16
//! pyramid rows (|fx| <= mu fz and |fy| <= mu fz per foot, two-sided). A
//! leg counts as stance for a block only when it is in stance at every
//! step the block covers; a touchdown or liftoff inside the block zeroes
//! the whole block, since a held force must be valid for the entire hold.
//! Pyramid bounds never change and are vacuously satisfied by pinned swing
//! feet, so row indices keep their meaning across ticks and warm active
//! sets stay valid after shifting. With friction == 0 the pyramid would pin
//! the tangentials by itself at fz == 0 but degenerates; tangential boxes
//! collapse to [0, 0] instead and pyramid rows are omitted entirely.

use nalgebra::{DMatrix, DVector, SVector, Vector3};

use crate::error::{Error, Result};
use crate::koopman::{lift, KoopmanModel};
use crate::qp::{self, BoundedQp, KktCertificate, QpOptions, SolveStatus, WarmStart};
use crate::srb::{RigidBodyState, StateVector, NUM_LEGS, STATE_DIM};

pub const FORCE_DIM: usize = 3 * NUM_LEGS;

/// Diagonal state weights (order: position, orientation, linear velocity,
/// angular velocity) and the scalar force effort weight.
#[derive(Clone, Copy, Debug)]
pub struct MpcWeights {
    pub q: SVector<f64, STATE_DIM>,
    pub r: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            q: SVector::from_vec(vec![
                50.0, 50.0, 100.0, // position
                100.0, 100.0, 100.0, // orientation
                10.0, 10.0, 20.0, // linear velocity
                1.0, 1.0, 1.0, // angular velocity
            ]),
            // Two-sided constraint: far below Q/|f|^2 (~1e-4) or the body
            // sags, yet large enough that fixing a velocity error is spread
            // over several steps instead of one saturated millisecond, and
            // that the 6-per-step null space of internal force distributions
            // is firmly regularized (B'QB is singular along it). At 4e-6 a
            // correction spans ~m/dt * sqrt(r/Q_v) ~ 6 steps and hover droop
            // stays near a millimeter.
            r: 4e-6,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MpcConfig {
    /// Prediction steps, each one model dt.
    pub horizon: usize,
    /// Model steps between control ticks. Each planned force is held for
    /// this many steps, and the warm start shifts by one such block.
    pub control_period: usize,
    pub weights: MpcWeights,
    /// Friction coefficient for the pyramid rows.
    pub friction: f64,
    /// Stance vertical force bounds, 0 <= fz_min <= fz_max. A small positive
    /// floor keeps loaded contacts away from the cone apex, where the
    /// friction rows pin the tangentials with two coincident constraints and
    /// the active set grinds on the degeneracy.
    pub fz_min: f64,
    pub fz_max: f64,
    pub qp: QpOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            control_period: 5,
            weights: MpcWeights::default(),
            friction: 0.6,
            fz_min: 0.0,
            fz_max: 250.0,
            qp: QpOptions::default(),
        }
    }
}

impl MpcConfig {
    fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig {
                detail: "mpc horizon must be at least one step".into(),
            });
        }
        if self.control_period == 0 || self.control_period > self.horizon {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "control period {} must be in 1..={}",
                    self.control_period, self.horizon
                ),
            });
        }
        if !(self.friction >= 0.0 && self.friction.is_finite()) {
            return Err(Error::InvalidConfig {
                detail: format!("friction must be finite and nonnegative, got {}", self.friction),
            });
        }
        if self.fz_min > self.fz_max || self.fz_min < 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("vertical force bounds [{}, {}] invalid", self.fz_min, self.fz_max),
            });
        }
        if self.weights.r <= 0.0 || self.weights.q.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig {
                detail: "weights must be nonnegative with positive effort weight".into(),
            });
        }
        Ok(())
    }

    fn rows_per_block(&self) -> usize {
        if self.friction > 0.0 {
            FORCE_DIM + 4 * NUM_LEGS
        } else {
            FORCE_DIM
        }
    }

    /// Number of held-force blocks covering the horizon; the last block may
    /// be shorter when the horizon is not a multiple of the period. The
    /// decision vector holds one force set per block.
    pub fn num_blocks(&self) -> usize {
        self.horizon.div_ceil(self.control_period)
    }

    /// Model steps covered by block `b`.
    pub fn block_len(&self, b: usize) -> usize {
        let start = b * self.control_period;
        (start + self.control_period).min(self.horizon) - start
    }

    /// Tangential box limit: the pyramid at maximum vertical force.
    fn tangential_limit(&self) -> f64 {
        self.friction * self.fz_max
    }
}

/// Stacks the model over a horizon: predicted states x_1..x_k as
/// X = a_qp z0 + b_qp U with U the stacked per-step forces. Block row i of
/// `a_qp` is C A^{i+1}; block (i, j) of `b_qp` is C A^{i-j} B for j <= i,
/// where C selects the raw state from the lifted vector.
pub fn condense(model: &KoopmanModel, horizon: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.lifted_dim();
    let m = model.control_dim();
    let rows = STATE_DIM * horizon;

    let mut a_qp = DMatrix::zeros(rows, n);
    let mut b_qp = DMatrix::zeros(rows, m * horizon);

    // a_power = A^{i+1}, ab_chain[j] = A^j B, built incrementally.
    let mut a_power = model.a.clone();
    let mut ab_chain: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    ab_chain.push(model.b.clone());
    for i in 0..horizon {
        a_qp.view_mut((STATE_DIM * i, 0), (STATE_DIM, n))
            .copy_from(&a_power.view((1, 0), (STATE_DIM, n)));
        for j in 0..=i {
            let chain = &ab_chain[i - j];
            b_qp.view_mut((STATE_DIM * i, m * j), (STATE_DIM, m))
                .copy_from(&chain.view((1, 0), (STATE_DIM, m)));
        }
        if i + 1 < horizon {
            a_power = &model.a * a_power;
            ab_chain.push(&model.a * ab_chain.last().unwrap());
        }
    }
    (a_qp, b_qp)
}

/// Per-tick result: forces to apply now, the full planned sequence, and the
/// solver diagnostics the harness logs.
#[derive(Clone, Debug)]
pub struct MpcTick {
    pub forces: [Vector3<f64>; NUM_LEGS],
    /// Planned forces, one column per horizon step.
    pub plan: DMatrix<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    pub certificate: KktCertificate,
    pub solve_time: std::time::Duration,
    /// True when the solve fell short of a certified optimum; forces are
    /// still safe (projected into their boxes) but stale-plan handling is up
    /// to the caller.
    pub degraded: bool,
}

pub struct MpcController {
    model: KoopmanModel,
    cfg: MpcConfig,
    a_qp: DMatrix<f64>,
    /// Condensed input map with held-force columns: per-step columns of the
    /// plain condensation summed within each control period.
    b_blk: DMatrix<f64>,
    /// 2 (b_blk' Q b_blk + R), constant across ticks. The effort term
    /// scales with block length: a force held for L steps costs L r |u|^2.
    h: DMatrix<f64>,
    /// Constraint matrix, constant across ticks (bounds vary).
    c: DMatrix<f64>,
    q_diag: DVector<f64>,
    warm: Option<WarmStart>,
}

impl MpcController {
    pub fn new(model: KoopmanModel, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if model.control_dim() != FORCE_DIM {
            return Err(Error::DimensionMismatch {
                context: "mpc control dimension",
                expected: FORCE_DIM,
                got: model.control_dim(),
            });
        }
        let k = cfg.horizon;
        let nb = cfg.num_blocks();
        let (a_qp, b_qp) = condense(&model, k);

        let mut b_blk = DMatrix::zeros(STATE_DIM * k, FORCE_DIM * nb);
        for i in 0..k {
            let b = i / cfg.control_period;
            let mut dst = b_blk.view_mut((0, FORCE_DIM * b), (STATE_DIM * k, FORCE_DIM));
            dst += b_qp.view((0, FORCE_DIM * i), (STATE_DIM * k, FORCE_DIM));
        }

        let mut q_diag = DVector::zeros(STATE_DIM * k);
        for i in 0..k {
            for j in 0..STATE_DIM {
                q_diag[STATE_DIM * i + j] = cfg.weights.q[j];
            }
        }
        let mut qb = b_blk.clone();
        for (i, mut row) in qb.row_iter_mut().enumerate() {
            row *= q_diag[i];
        }
        let mut h = b_blk.transpose() * qb * 2.0;
        for b in 0..nb {
            let r_block = 2.0 * cfg.weights.r * cfg.block_len(b) as f64;
            for j in 0..FORCE_DIM {
                let d = FORCE_DIM * b + j;
                h[(d, d)] += r_block;
            }
        }

        let c = build_constraint_matrix(&cfg);

        Ok(Self {
            model,
            cfg,
            a_qp,
            b_blk,
            h,
            c,
            q_diag,
            warm: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &KoopmanModel {
        &self.model
    }

    /// Drops the carried warm start (next tick solves cold).
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Stacks a per-step reference into the 12k vector the cost uses.
    pub fn stack_reference(&self, reference: &[StateVector]) -> Result<DVector<f64>> {
        if reference.len() != self.cfg.horizon {
            return Err(Error::DimensionMismatch {
                context: "mpc reference length",
                expected: self.cfg.horizon,
                got: reference.len(),
            });
        }
        let mut xd = DVector::zeros(STATE_DIM * self.cfg.horizon);
        for (i, r) in reference.iter().enumerate() {
            xd.rows_mut(STATE_DIM * i, STATE_DIM).copy_from(r);
        }
        Ok(xd)
    }

    /// Linear cost term for a lifted initial state and stacked reference:
    /// g = 2 b_blk' Q (a_qp z0 - xd).
    pub fn cost_vector(&self, z0: &DVector<f64>, xd: &DVector<f64>) -> DVector<f64> {
        let mut err = &self.a_qp * z0 - xd;
        for i in 0..err.len() {
            err[i] *= self.q_diag[i];
        }
        2.0 * (self.b_blk.transpose() * err)
    }

    /// Tracking-plus-effort cost of a force plan (one vector per block,
    /// held over its steps), evaluated by rolling the model recursively
    /// with no condensation. Tests compare its finite differences against
    /// the quadratic gradient.
    pub fn rollout_cost(&self, z0: &DVector<f64>, xd: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let k = self.cfg.horizon;
        let mut z = z0.clone();
        let mut cost = 0.0;
        for i in 0..k {
            let ui = u.rows(FORCE_DIM * (i / self.cfg.control_period), FORCE_DIM);
            z = &self.model.a * z + &self.model.b * ui;
            for j in 0..STATE_DIM {
                let e = z[1 + j] - xd[STATE_DIM * i + j];
                cost += self.cfg.weights.q[j] * e * e;
            }
            cost += self.cfg.weights.r * ui.norm_squared();
        }
        cost
    }

    /// Gradient of `rollout_cost` in the blocked force plan, from the
    /// condensed quadratic: H u + g.
    pub fn cost_gradient(&self, z0: &DVector<f64>, xd: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.h * u + self.cost_vector(z0, xd)
    }

    /// One control tick. `stance` gives the contact schedule for each
    /// horizon step; `reference` the desired state at steps 1..=horizon.
    pub fn control(
        &mut self,
        state: &RigidBodyState,
        stance: &[[bool; NUM_LEGS]],
        reference: &[StateVector],
    ) -> Result<MpcTick> {
        let k = self.cfg.horizon;
        if stance.len() != k {
            return Err(Error::DimensionMismatch {
                context: "mpc stance schedule length",
                expected: k,
                got: stance.len(),
            });
        }
        let started = std::time::Instant::now();

        let z0 = lift(state, self.model.dictionary_order);
        let xd = self.stack_reference(reference)?;
        let g = self.cost_vector(&z0, &xd);
        let blocked = self.block_stance(stance);
        let (lo, hi) = self.build_bounds(&blocked);

        let qp_problem = BoundedQp {
            h: self.h.clone(),
            g,
            c: self.c.clone(),
            lo,
            hi,
        };
        let sol = qp::solve(&qp_problem, self.warm.as_ref(), &self.cfg.qp)?;
        let solve_time = started.elapsed();

        if sol.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "mpc force plan",
            });
        }

        let degraded = sol.status != SolveStatus::Optimal
            || !sol.certificate.passes(100.0 * self.cfg.qp.tol * (1.0 + self.cfg.fz_max));

        // First-block forces, with swing feet zeroed exactly (the QP pins
        // them to zero only up to solver tolerance).
        let mut forces = [Vector3::zeros(); NUM_LEGS];
        let tangential = self.cfg.tangential_limit();
        for leg in 0..NUM_LEGS {
            if blocked[0][leg] {
                let f = sol.u.fixed_rows::<3>(3 * leg);
                forces[leg] = Vector3::new(
                    f[0].clamp(-tangential, tangential),
                    f[1].clamp(-tangential, tangential),
                    f[2].clamp(self.cfg.fz_min, self.cfg.fz_max),
                );
            }
        }

        let mut plan = DMatrix::zeros(FORCE_DIM, k);
        for i in 0..k {
            let b = i / self.cfg.control_period;
            plan.column_mut(i)
                .copy_from(&sol.u.rows(FORCE_DIM * b, FORCE_DIM));
        }

        self.warm = Some(self.shifted_warm_start(&sol.u, &sol.active));

        Ok(MpcTick {
            forces,
            plan,
            iterations: sol.iterations,
            status: sol.status,
            certificate: sol.certificate,
            solve_time,
            degraded,
        })
    }

    /// Collapses a per-step stance schedule to one entry per block: stance
    /// only where the leg is loaded for the block's whole hold.
    fn block_stance(&self, stance: &[[bool; NUM_LEGS]]) -> Vec<[bool; NUM_LEGS]> {
        (0..self.cfg.num_blocks())
            .map(|b| {
                let start = b * self.cfg.control_period;
                let steps = &stance[start..start + self.cfg.block_len(b)];
                let mut all = [true; NUM_LEGS];
                for s in steps {
                    for leg in 0..NUM_LEGS {
                        all[leg] &= s[leg];
                    }
                }
                all
            })
            .collect()
    }

    /// Bounds for the fixed row layout under a blocked stance schedule.
    fn build_bounds(&self, blocked: &[[bool; NUM_LEGS]]) -> (DVector<f64>, DVector<f64>) {
        let nb = self.cfg.num_blocks();
        let rows = self.cfg.rows_per_block() * nb;
        let mut lo = DVector::zeros(rows);
        let mut hi = DVector::zeros(rows);
        let tangential = self.cfg.tangential_limit();
        let with_pyramid = self.cfg.friction > 0.0;
        let per_block = self.cfg.rows_per_block();
        for i in 0..nb {
            let base = per_block * i;
            for leg in 0..NUM_LEGS {
                let b = base + 3 * leg;
                if blocked[i][leg] {
                    lo[b] = -tangential;
                    hi[b] = tangential;
                    lo[b + 1] = -tangential;
                    hi[b + 1] = tangential;
                    lo[b + 2] = self.cfg.fz_min;
                    hi[b + 2] = self.cfg.fz_max;
                } else {
                    // lo == hi == 0: equality rows the solver keeps pinned.
                }
            }
            if with_pyramid {
                let pyr = base + FORCE_DIM;
                for leg in 0..NUM_LEGS {
                    let p = pyr + 4 * leg;
                    if !blocked[i][leg] {
                        // Swing forces are pinned to zero by their equality
                        // rows; leaving the cone rows at their bounds would
                        // only feed the active set degenerate candidates.
                        for j in 0..4 {
                            lo[p + j] = f64::NEG_INFINITY;
                            hi[p + j] = f64::INFINITY;
                        }
                        continue;
                    }
                    lo[p] = f64::NEG_INFINITY;
                    hi[p] = 0.0;
                    lo[p + 1] = 0.0;
                    hi[p + 1] = f64::INFINITY;
                    lo[p + 2] = f64::NEG_INFINITY;
                    hi[p + 2] = 0.0;
                    lo[p + 3] = 0.0;
                    hi[p + 3] = f64::INFINITY;
                }
            }
        }
        (lo, hi)
    }

    /// Shifts the previous solution by one block (one control tick): blocks
    /// move earlier, the tail repeats the last block, and surviving active
    /// rows are re-indexed. Rows shifted out are dropped; the fresh tail
    /// starts inactive.
    fn shifted_warm_start(&self, u: &DVector<f64>, active: &[(usize, qp::Side)]) -> WarmStart {
        let nb = self.cfg.num_blocks();
        let per_block = self.cfg.rows_per_block();

        let mut u_next = DVector::zeros(FORCE_DIM * nb);
        for b in 0..nb {
            let src = (b + 1).min(nb - 1);
            u_next
                .rows_mut(FORCE_DIM * b, FORCE_DIM)
                .copy_from(&u.rows(FORCE_DIM * src, FORCE_DIM));
        }

        let mut active_next = Vec::with_capacity(active.len());
        for &(row, side) in active {
            if row / per_block >= 1 {
                active_next.push((row - per_block, side));
            }
        }
        WarmStart {
            u: u_next,
            active: active_next,
        }
    }
}

fn build_constraint_matrix(cfg: &MpcConfig) -> DMatrix<f64> {
    let nb = cfg.num_blocks();
    let per_block = cfg.rows_per_block();
    let mut c = DMatrix::zeros(per_block * nb, FORCE_DIM * nb);
    let with_pyramid = cfg.friction > 0.0;
    for i in 0..nb {
        let base = per_block * i;
        let col = FORCE_DIM * i;
        for j in 0..FORCE_DIM {
            c[(base + j, col + j)] = 1.0;
        }
        if with_pyramid {
            let pyr = base + FORCE_DIM;
            for leg in 0..NUM_LEGS {
                let p = pyr + 4 * leg;
                let fx = col + 3 * leg;
                let fy = fx + 1;
                let fz = fx + 2;
                c[(p, fx)] = 1.0;
                c[(p, fz)] = -cfg.friction;
                c[(p + 1, fx)] = 1.0;
                c[(p + 1, fz)] = cfg.friction;
                c[(p + 2, fy)] = 1.0;
                c[(p + 2, fz)] = -cfg.friction;
                c[(p + 3, fy)] = 1.0;
                c[(p + 3, fz)] = cfg.friction;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::{edmd_fit, generate_dataset, SysidConfig};
    use crate::srb::ModelParams;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quick_model() -> KoopmanModel {
        let params = ModelParams::default_quadruped();
        let cfg = SysidConfig {
            num_rollouts: 60,
            rollout_duration: 0.05,
            ..SysidConfig::default()
        };
        let data = generate_dataset(&cfg, &params, 19).unwrap();
        edmd_fit(&data, cfg.dictionary_order, None).unwrap().model
    }

    fn hover_reference(k: usize) -> Vec<StateVector> {
        let mut x = StateVector::zeros();
        x[2] = 0.3;
        vec![x; k]
    }

    fn hover_state() -> RigidBodyState {
        RigidBodyState::new(
            Vector3::new(0.0, 0.0, 0.3),
            Vector3::zeros(),
            Vector3::zeros(),
            Vector3::zeros(),
        )
    }

    #[test]
    fn condensation_matches_recursive_rollout() {
        let model = quick_model();
        let k = 8;
        let (a_qp, b_qp) = condense(&model, k);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let state = RigidBodyState::new(
                Vector3::new(rng.gen_range(-0.3..0.3), 0.0, 0.3),
                Vector3::new(0.0, rng.gen_range(-0.1..0.1), 0.0),
                Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3)),
                Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
            );
            let z0 = lift(&state, model.dictionary_order);
            let u = DVector::from_fn(FORCE_DIM * k, |_, _| rng.gen_range(-30.0..30.0));

            let condensed = &a_qp * &z0 + &b_qp * &u;

            let mut z = z0.clone();
            for i in 0..k {
                z = &model.a * &z + &model.b * u.rows(FORCE_DIM * i, FORCE_DIM);
                let pred = condensed.rows(STATE_DIM * i, STATE_DIM);
                for j in 0..STATE_DIM {
                    assert!(
                        (pred[j] - z[1 + j]).abs() < 1e-10,
                        "step {i} coord {j}: {} vs {}",
                        pred[j],
                        z[1 + j]
                    );
                }
            }
        }
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let model = quick_model();
        let cfg = MpcConfig {
            horizon: 5,
            control_period: 2,
            ..MpcConfig::default()
        };
        let ctrl = MpcController::new(model, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        let state = hover_state();
        let z0 = lift(&state, ctrl.model.dictionary_order);
        let xd = ctrl.stack_reference(&hover_reference(5)).unwrap();
        // Horizon 5 with period 2 gives three held-force blocks.
        let u = DVector::from_fn(FORCE_DIM * 3, |_, _| rng.gen_range(-20.0..20.0));

        let grad = ctrl.cost_gradient(&z0, &xd, &u);
        let eps = 1e-4;
        for idx in [0usize, 7, 17, 23, 35] {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[idx] += eps;
            dn[idx] -= eps;
            let fd = (ctrl.rollout_cost(&z0, &xd, &up) - ctrl.rollout_cost(&z0, &xd, &dn))
                / (2.0 * eps);
            assert_relative_eq!(grad[idx], fd, max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn hover_forces_support_weight_and_respect_cones() {
        let model = quick_model();
        let cfg = MpcConfig::default();
        let mu = cfg.friction;
        let mut ctrl = MpcController::new(model, cfg).unwrap();
        let stance = vec![[true; NUM_LEGS]; 10];
        let tick = ctrl
            .control(&hover_state(), &stance, &hover_reference(10))
            .unwrap();
        assert_eq!(tick.status, SolveStatus::Optimal);
        assert!(!tick.degraded, "certificate {:?}", tick.certificate);
        let total_z: f64 = tick.forces.iter().map(|f| f.z).sum();
        let weight = ModelParams::default_quadruped().weight();
        assert_relative_eq!(total_z, weight, max_relative = 0.05);
        for f in &tick.forces {
            assert!(f.x.abs() <= mu * f.z + 1e-6);
            assert!(f.y.abs() <= mu * f.z + 1e-6);
            assert!(f.z >= 0.0);
        }
    }

    #[test]
    fn swing_feet_get_exactly_zero_force() {
        let model = quick_model();
        let mut ctrl = MpcController::new(model, MpcConfig::default()).unwrap();
        // Trot stance: FR+RL on the ground, FL+RR swinging.
        let stance = vec![[true, false, false, true]; 10];
        let tick = ctrl
            .control(&hover_state(), &stance, &hover_reference(10))
            .unwrap();
        assert_eq!(tick.forces[1], Vector3::zeros());
        assert_eq!(tick.forces[2], Vector3::zeros());
        assert!(tick.forces[0].z > 0.0);
        assert!(tick.forces[3].z > 0.0);
    }

    #[test]
    fn plan_is_constant_within_each_control_period() {
        let model = quick_model();
        let mut ctrl = MpcController::new(model, MpcConfig::default()).unwrap();
        let stance = vec![[true; NUM_LEGS]; 10];
        let mut state = hover_state();
        state.linear_velocity.x = 0.2;
        let tick = ctrl.control(&state, &stance, &hover_reference(10)).unwrap();
        for i in 0..10 {
            let head = 5 * (i / 5);
            assert_eq!(tick.plan.column(i), tick.plan.column(head));
        }
        assert_ne!(tick.plan.column(0), tick.plan.column(5));
    }

    #[test]
    fn mid_block_liftoff_zeroes_the_whole_block() {
        let model = quick_model();
        let mut ctrl = MpcController::new(model, MpcConfig::default()).unwrap();
        // FL leaves the ground two steps into the first block.
        let mut stance = vec![[true; NUM_LEGS]; 10];
        for step in stance.iter_mut().take(5).skip(2) {
            step[1] = false;
        }
        let tick = ctrl
            .control(&hover_state(), &stance, &hover_reference(10))
            .unwrap();
        assert_eq!(tick.forces[1], Vector3::zeros());
        assert!(tick.forces[0].z > 0.0);
        // Second block has all feet down again.
        assert!(tick.plan[(3 * 1 + 2, 5)] > 0.0);
    }

    #[test]
    fn warm_started_tick_is_cheap_and_optimal() {
        let model = quick_model();
        let mut ctrl = MpcController::new(model, MpcConfig::default()).unwrap();
        let stance = vec![[true; NUM_LEGS]; 10];
        let first = ctrl
            .control(&hover_state(), &stance, &hover_reference(10))
            .unwrap();
        let mut nudged = hover_state();
        nudged.position.z += 0.003;
        let second = ctrl.control(&nudged, &stance, &hover_reference(10)).unwrap();
        assert_eq!(second.status, SolveStatus::Optimal);
        assert!(
            second.iterations <= first.iterations,
            "warm {} vs cold {}",
            second.iterations,
            first.iterations
        );
    }

    #[test]
    fn zero_friction_collapses_tangential_boxes() {
        let model = quick_model();
        let cfg = MpcConfig {
            friction: 0.0,
            ..MpcConfig::default()
        };
        let mut ctrl = MpcController::new(model, cfg).unwrap();
        // Two blocks (horizon 10, period 5), box rows only.
        assert_eq!(ctrl.c.nrows(), 2 * FORCE_DIM);
        let stance = vec![[true; NUM_LEGS]; 10];
        let tick = ctrl
            .control(&hover_state(), &stance, &hover_reference(10))
            .unwrap();
        for f in &tick.forces {
            assert_eq!(f.x, 0.0);
            assert_eq!(f.y, 0.0);
        }
    }

    #[test]
    fn bad_schedule_length_is_rejected() {
        let model = quick_model();
        let mut ctrl = MpcController::new(model, MpcConfig::default()).unwrap();
        let stance = vec![[true; NUM_LEGS]; 3];
        assert!(ctrl
            .control(&hover_state(), &stance, &hover_reference(10))
            .is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let model = quick_model();
        let bad_horizon = MpcConfig {
            horizon: 0,
            ..MpcConfig::default()
        };
        assert!(MpcController::new(model.clone(), bad_horizon).is_err());
        let bad_period = MpcConfig {
            control_period: 20,
            ..MpcConfig::default()
        };
        assert!(MpcController::new(model, bad_period).is_err());
    }
}
