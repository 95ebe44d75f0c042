//! Open-loop validation of a fitted model: fresh random rollouts of the
//! plant, the model propagated purely in lifted coordinates from the lifted
//! initial condition (never re-lifted mid-horizon), errors pooled over
//! rollouts per state coordinate per step.

use nalgebra::{DMatrix, SVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::koopman::dataset::SysidConfig;
use crate::koopman::edmd::KoopmanModel;
use crate::koopman::lift::lift;
use crate::par;
use crate::srb::{rk4_step, ControlInput, ModelParams, RigidBodyState, NUM_LEGS, STATE_DIM};

/// State coordinates grouped three at a time, in storage order.
pub const GROUP_NAMES: [&str; 4] = [
    "position",
    "orientation",
    "linear_velocity",
    "angular_velocity",
];

/// Pooled open-loop prediction errors. Columns index steps 0..=horizon,
/// rows index the 12 state coordinates; errors are signed (predicted minus
/// true), so `mean_error` cancels symmetric scatter and exposes bias.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub horizon: usize,
    pub num_rollouts: usize,
    pub mean_error: DMatrix<f64>,
    pub error_variance: DMatrix<f64>,
    /// max_t |mean error| per three-coordinate group, ordered as GROUP_NAMES.
    pub group_max_mean_abs: [f64; 4],
    /// max over all coordinates and steps of |mean error|.
    pub max_mean_abs: f64,
    /// max over all rollouts, coordinates and steps of the raw |error|.
    pub max_rollout_abs: f64,
}

impl FitReport {
    fn from_rollout_errors(errors: &[Vec<f64>], horizon: usize) -> Self {
        let cols = horizon + 1;
        let num_rollouts = errors.len();
        let mut mean = DMatrix::zeros(STATE_DIM, cols);
        let mut var = DMatrix::zeros(STATE_DIM, cols);
        let mut max_raw: f64 = 0.0;
        for e in errors {
            for (idx, v) in e.iter().enumerate() {
                mean[(idx % STATE_DIM, idx / STATE_DIM)] += v;
                max_raw = max_raw.max(v.abs());
            }
        }
        mean /= num_rollouts as f64;
        for e in errors {
            for (idx, v) in e.iter().enumerate() {
                let d = v - mean[(idx % STATE_DIM, idx / STATE_DIM)];
                var[(idx % STATE_DIM, idx / STATE_DIM)] += d * d;
            }
        }
        var /= num_rollouts as f64;

        let mut group_max = [0.0f64; 4];
        let mut max_mean: f64 = 0.0;
        for j in 0..cols {
            for i in 0..STATE_DIM {
                let m = mean[(i, j)].abs();
                group_max[i / 3] = group_max[i / 3].max(m);
                max_mean = max_mean.max(m);
            }
        }
        Self {
            horizon,
            num_rollouts,
            mean_error: mean,
            error_variance: var,
            group_max_mean_abs: group_max,
            max_mean_abs: max_mean,
            max_rollout_abs: max_raw,
        }
    }

    /// One line per coordinate group, for CLI reporting.
    pub fn summary_lines(&self) -> Vec<String> {
        GROUP_NAMES
            .iter()
            .zip(self.group_max_mean_abs.iter())
            .map(|(name, v)| format!("{name}: max |mean error| = {v:.3e}"))
            .collect()
    }
}

fn rollout_errors<S, C>(
    index: usize,
    seed: u64,
    model: &KoopmanModel,
    cfg: &SysidConfig,
    params: &ModelParams,
    state_sampler: &S,
    control_sampler: &C,
) -> Result<Vec<f64>>
where
    S: Fn(&mut ChaCha8Rng) -> RigidBodyState,
    C: Fn(&mut ChaCha8Rng) -> [Vector3<f64>; NUM_LEGS],
{
    let steps = cfg.steps_per_rollout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);

    let mut x = state_sampler(&mut rng);
    let x0 = x.to_vector();
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSample {
            detail: "non-finite validation initial state".into(),
        });
    }

    let mut z = lift(&x, model.dictionary_order);
    let mut errors = vec![0.0; STATE_DIM * (steps + 1)];
    for k in 0..steps {
        let forces = control_sampler(&mut rng);
        let input = ControlInput::new(forces, cfg.lever_arms, [true; NUM_LEGS]);
        x = rk4_step(&x, &input, params, cfg.dt)?;

        let mut u = SVector::<f64, 12>::zeros();
        for (leg, f) in forces.iter().enumerate() {
            u.fixed_rows_mut::<3>(3 * leg).copy_from(f);
        }
        z = &model.a * z + &model.b * u;

        let truth = x.to_vector();
        for i in 0..STATE_DIM {
            errors[(k + 1) * STATE_DIM + i] = z[1 + i] - truth[i];
        }
    }
    Ok(errors)
}

fn run_eval<S, C>(
    model: &KoopmanModel,
    cfg: &SysidConfig,
    params: &ModelParams,
    seed: u64,
    state_sampler: S,
    control_sampler: C,
    sequential: bool,
) -> Result<FitReport>
where
    S: Fn(&mut ChaCha8Rng) -> RigidBodyState + Sync,
    C: Fn(&mut ChaCha8Rng) -> [Vector3<f64>; NUM_LEGS] + Sync,
{
    cfg.validate()?;
    model.validate()?;
    if cfg.dictionary_order != model.dictionary_order {
        return Err(Error::InvalidConfig {
            detail: format!(
                "evaluation dictionary order {} does not match model order {}",
                cfg.dictionary_order, model.dictionary_order
            ),
        });
    }
    if (cfg.dt - model.dt).abs() > 1e-12 {
        return Err(Error::InvalidConfig {
            detail: format!("evaluation dt {} does not match model dt {}", cfg.dt, model.dt),
        });
    }
    let steps = cfg.steps_per_rollout();
    let body = |i: usize| {
        rollout_errors(i, seed, model, cfg, params, &state_sampler, &control_sampler)
    };
    let results = if sequential {
        par::map_indexed_seq(cfg.num_rollouts, body)
    } else {
        par::map_indexed(cfg.num_rollouts, body)
    };
    let errors = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(FitReport::from_rollout_errors(&errors, steps))
}

/// Evaluates the model on `cfg.num_rollouts` fresh rollouts drawn with the
/// config's own samplers. Parallel when the `parallel` feature is on; output
/// is independent of thread count.
pub fn evaluate_fit(
    model: &KoopmanModel,
    cfg: &SysidConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<FitReport> {
    run_eval(
        model,
        cfg,
        params,
        seed,
        |rng| cfg.sample_state(rng),
        |rng| cfg.sample_forces(rng),
        false,
    )
}

/// Reference sequential path; bit-identical to `evaluate_fit`.
pub fn evaluate_fit_seq(
    model: &KoopmanModel,
    cfg: &SysidConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<FitReport> {
    run_eval(
        model,
        cfg,
        params,
        seed,
        |rng| cfg.sample_state(rng),
        |rng| cfg.sample_forces(rng),
        true,
    )
}

/// Evaluation with caller-supplied samplers.
pub fn evaluate_fit_with<S, C>(
    model: &KoopmanModel,
    cfg: &SysidConfig,
    params: &ModelParams,
    seed: u64,
    state_sampler: S,
    control_sampler: C,
) -> Result<FitReport>
where
    S: Fn(&mut ChaCha8Rng) -> RigidBodyState + Sync,
    C: Fn(&mut ChaCha8Rng) -> [Vector3<f64>; NUM_LEGS] + Sync,
{
    run_eval(model, cfg, params, seed, state_sampler, control_sampler, false)
}
