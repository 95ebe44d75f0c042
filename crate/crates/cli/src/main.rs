//! Batch experiment harness. Four stages, each a subcommand: `sysid` fits
//! and validates a lifted model from random plant rollouts, `fit-eval`
//! re-scores a saved model on fresh rollouts, `simulate` runs a closed-loop
//! scenario, and `metrics` re-scores a saved run log.
//!
//! Exit code 0 means the stage ran and its thresholds passed, 1 means it
//! ran but a threshold failed (or the robot fell), 2 means it could not
//! run at all.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use koopmpc::koopman::{
    edmd_fit, evaluate_fit, generate_dataset, FitReport, KoopmanModel, SysidConfig, GROUP_NAMES,
};
use koopmpc::sim::{
    compute_metrics, evaluate_thresholds, run_experiment, ExperimentConfig, PlantConfig, RunLog,
    RunMetrics, RunOutput, ThresholdCheck,
};

#[derive(Parser)]
#[command(name = "koopmpc", version, about = "Lifted-model identification and predictive gait control, batch style")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate rollouts, fit the lifted model, validate on fresh rollouts,
    /// and write dataset, model, and report artifacts.
    Sysid(SysidArgs),
    /// Score a saved model against fresh validation rollouts.
    FitEval(FitEvalArgs),
    /// Run a closed-loop scenario and write its log and metrics.
    Simulate(SimulateArgs),
    /// Recompute metrics from a saved run log.
    Metrics(MetricsArgs),
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch() -> anyhow::Result<bool> {
    match Cli::parse().command {
        Command::Sysid(a) => cmd_sysid(a),
        Command::FitEval(a) => cmd_fit_eval(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

/// Identification stage settings, loadable from TOML. Every field has a
/// default, so a config file only states what it changes.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(default)]
struct IdentifyConfig {
    num_rollouts: usize,
    /// Length of each training rollout, s.
    rollout_duration: f64,
    dt: f64,
    dictionary_order: usize,
    /// Fresh rollouts for the validation report.
    eval_rollouts: usize,
    /// Open-loop horizon of each validation rollout, s.
    eval_duration: f64,
    /// Pass bar: max |pooled mean error| over the validation set.
    max_mean_error: f64,
    plant: PlantConfig,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            num_rollouts: 2000,
            rollout_duration: 0.05,
            dt: 1e-3,
            dictionary_order: 4,
            eval_rollouts: 1000,
            eval_duration: 0.1,
            max_mean_error: 2e-3,
            plant: PlantConfig::default(),
        }
    }
}

impl IdentifyConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn training(&self) -> SysidConfig {
        SysidConfig {
            num_rollouts: self.num_rollouts,
            rollout_duration: self.rollout_duration,
            dt: self.dt,
            dictionary_order: self.dictionary_order,
            ..SysidConfig::default()
        }
    }

    fn validation(&self) -> SysidConfig {
        SysidConfig {
            num_rollouts: self.eval_rollouts,
            rollout_duration: self.eval_duration,
            ..self.training()
        }
    }
}

#[derive(Args)]
struct SysidArgs {
    /// Identification settings TOML; defaults are built in.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for dataset.json, model.json, fit_report.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Skip the dataset artifact (it is by far the largest).
    #[arg(long)]
    no_dataset: bool,
}

fn cmd_sysid(a: SysidArgs) -> anyhow::Result<bool> {
    let cfg = IdentifyConfig::load(a.config.as_deref())?;
    let params = cfg.plant.to_params()?;
    let train = cfg.training();
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;

    let started = Instant::now();
    let data = generate_dataset(&train, &params, a.seed)?;
    println!(
        "dataset: {} samples from {} rollouts in {:.2} s",
        data.samples(),
        train.num_rollouts,
        started.elapsed().as_secs_f64()
    );

    let fit = edmd_fit(&data, train.dictionary_order, None)?;
    println!(
        "fit: state residual {:.3e}, lifted residual {:.3e}, gram condition {:.2e}, ridge {:.2e}",
        fit.state_residual, fit.training_residual, fit.g2_condition, fit.regularization
    );

    // Validation draws must not reuse the training seed.
    let report = evaluate_fit(&fit.model, &cfg.validation(), &params, a.seed.wrapping_add(1))?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    let pass = report.max_mean_abs <= cfg.max_mean_error;
    println!(
        "max |mean error| {:.3e} vs bar {:.3e} -> {}",
        report.max_mean_abs,
        cfg.max_mean_error,
        verdict(pass)
    );

    if !a.no_dataset {
        data.save(&a.out_dir.join("dataset.json"))?;
    }
    fit.model.save(&a.out_dir.join("model.json"))?;
    write_json(
        &a.out_dir.join("fit_report.json"),
        &fit_report_json(&report, cfg.max_mean_error, pass, Some(&fit)),
    )?;
    println!("artifacts in {}", a.out_dir.display());
    Ok(pass)
}

#[derive(Args)]
struct FitEvalArgs {
    /// Saved model JSON to score.
    #[arg(long)]
    model: PathBuf,
    /// Identification settings TOML (validation fields and plant are used).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for fit_report.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn cmd_fit_eval(a: FitEvalArgs) -> anyhow::Result<bool> {
    let cfg = IdentifyConfig::load(a.config.as_deref())?;
    let params = cfg.plant.to_params()?;
    let model = KoopmanModel::load(&a.model)
        .with_context(|| format!("loading {}", a.model.display()))?;

    let report = evaluate_fit(&model, &cfg.validation(), &params, a.seed.wrapping_add(1))?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    let pass = report.max_mean_abs <= cfg.max_mean_error;
    println!(
        "max |mean error| {:.3e} vs bar {:.3e} -> {}",
        report.max_mean_abs,
        cfg.max_mean_error,
        verdict(pass)
    );

    std::fs::create_dir_all(&a.out_dir)?;
    write_json(
        &a.out_dir.join("fit_report.json"),
        &fit_report_json(&report, cfg.max_mean_error, pass, None),
    )?;
    Ok(pass)
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML (schema in the README).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: stand, track-velocity, track-turn, push-recovery,
    /// slip-recovery.
    #[arg(long)]
    preset: Option<String>,
    /// Saved model JSON; identified on the fly from built-in defaults when
    /// omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for run CSV and metrics JSON.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Run this many consecutive seeds (starting at the scenario seed) in
    /// parallel, each with its own suffixed artifacts.
    #[arg(long)]
    sweep: Option<usize>,
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<bool> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), None) => ExperimentConfig::load(path)
            .with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => ExperimentConfig::preset(name).with_context(|| {
            format!(
                "unknown preset {name:?}; available: {}",
                ExperimentConfig::PRESET_NAMES.join(", ")
            )
        })?,
        (None, None) => bail!("one of --config or --preset is required"),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let model = match &a.model {
        Some(path) => {
            KoopmanModel::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            println!("no --model given; identifying one from built-in defaults");
            let id = IdentifyConfig {
                plant: cfg.plant,
                ..IdentifyConfig::default()
            };
            let data = generate_dataset(&id.training(), &cfg.plant.to_params()?, cfg.seed)?;
            edmd_fit(&data, id.dictionary_order, None)?.model
        }
    };
    std::fs::create_dir_all(&a.out_dir)?;

    match a.sweep {
        None => {
            let out = run_experiment(&cfg, &model)?;
            report_run(&cfg, &out, &a.out_dir, None)
        }
        Some(0) => bail!("--sweep must be at least 1"),
        Some(n) => {
            // Independent seeds, isolated logs, one worker thread each.
            let runs: Vec<anyhow::Result<(u64, RunOutput)>> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..n as u64)
                    .map(|i| {
                        let mut c = cfg.clone();
                        c.seed = cfg.seed.wrapping_add(i);
                        let model = &model;
                        s.spawn(move || {
                            let out = run_experiment(&c, model)?;
                            Ok((c.seed, out))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
            let mut all_pass = true;
            for r in runs {
                let (seed, out) = r?;
                println!("\nseed {seed}:");
                all_pass &= report_run(&cfg, &out, &a.out_dir, Some(seed))?;
            }
            Ok(all_pass)
        }
    }
}

/// Writes the run's CSV and metrics JSON, prints the scorecard, and returns
/// whether the run survived and met every configured threshold.
fn report_run(
    cfg: &ExperimentConfig,
    out: &RunOutput,
    dir: &Path,
    seed_suffix: Option<u64>,
) -> anyhow::Result<bool> {
    let (csv_name, json_name) = match seed_suffix {
        None => ("run.csv".to_string(), "metrics.json".to_string()),
        Some(s) => (format!("run_seed{s}.csv"), format!("metrics_seed{s}.json")),
    };
    out.log.save(&dir.join(&csv_name))?;

    let metrics = compute_metrics(&out.log);
    let checks = evaluate_thresholds(&out.log, &cfg.thresholds);
    let pass = out.failure.is_none() && checks.iter().all(|c| c.pass);
    write_json(
        &dir.join(&json_name),
        &serde_json::json!({
            "metrics": metrics,
            "checks": checks,
            "failure": out.failure,
            "pass": pass,
        }),
    )?;

    print_metrics(&metrics);
    print_checks(&checks);
    if let Some(reason) = &out.failure {
        println!("run ended early: {reason}");
    }
    println!("{csv_name}, {json_name} in {} -> {}", dir.display(), verdict(pass));
    Ok(pass)
}

#[derive(Args)]
struct MetricsArgs {
    /// Run log CSV written by `simulate`.
    #[arg(long)]
    log: PathBuf,
    /// Scenario TOML; its thresholds decide pass or fail.
    #[arg(long)]
    config: Option<PathBuf>,
    /// When given, metrics.json is written here too.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_metrics(a: MetricsArgs) -> anyhow::Result<bool> {
    let log = RunLog::load(&a.log).with_context(|| format!("loading {}", a.log.display()))?;
    let metrics = compute_metrics(&log);
    print_metrics(&metrics);

    let checks = match &a.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?;
            evaluate_thresholds(&log, &cfg.thresholds)
        }
        None => Vec::new(),
    };
    print_checks(&checks);
    let pass = checks.iter().all(|c| c.pass);

    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(
            &dir.join("metrics.json"),
            &serde_json::json!({
                "metrics": metrics,
                "checks": checks,
                "failure": null,
                "pass": pass,
            }),
        )?;
    }
    Ok(pass)
}

fn fit_report_json(
    report: &FitReport,
    bar: f64,
    pass: bool,
    fit: Option<&koopmpc::koopman::EdmdFit>,
) -> serde_json::Value {
    let groups: serde_json::Map<String, serde_json::Value> = GROUP_NAMES
        .iter()
        .zip(report.group_max_mean_abs.iter())
        .map(|(name, v)| (name.to_string(), (*v).into()))
        .collect();
    let mut value = serde_json::json!({
        "eval_rollouts": report.num_rollouts,
        "eval_horizon_steps": report.horizon,
        "group_max_mean_abs": groups,
        "max_mean_abs": report.max_mean_abs,
        "max_rollout_abs": report.max_rollout_abs,
        "max_mean_error_bar": bar,
        "pass": pass,
    });
    if let Some(fit) = fit {
        value["training"] = serde_json::json!({
            "state_residual": fit.state_residual,
            "lifted_residual": fit.training_residual,
            "gram_condition": fit.g2_condition,
            "regularization": fit.regularization,
        });
    }
    value
}

fn print_metrics(m: &RunMetrics) {
    println!("{} ticks covering {:.2} s", m.ticks, m.duration);
    println!(
        "velocity rmse: vx {:.4}, vy {:.4}, xy pooled {:.4} m/s; yaw rate {:.4} rad/s",
        m.vx_rmse, m.vy_rmse, m.xy_velocity_rmse, m.yaw_rate_rmse
    );
    println!(
        "height min {:.3} m; |roll| max {:.3}, |pitch| max {:.3} rad",
        m.min_height, m.max_abs_roll, m.max_abs_pitch
    );
    println!(
        "solver: {} degraded, {} torque-saturated ticks; iterations median {:.0}; solve median {:.2} ms, max {:.2} ms",
        m.degraded_ticks,
        m.saturated_ticks,
        m.median_qp_iterations,
        1e3 * m.median_solve_time,
        1e3 * m.max_solve_time
    );
}

fn print_checks(checks: &[ThresholdCheck]) {
    for c in checks {
        println!(
            "  [{}] {}: {:.4} vs {:.4}",
            if c.pass { "pass" } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        );
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
