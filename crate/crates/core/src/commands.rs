//! Subcommand implementations behind the `softservo` binary.
//!
//! Each command returns `Ok(())` or a [`CliError`] whose [`CliError::exit_code`]
//! is 2 for configuration problems and 3 for runtime failures.

use crate::config::{ConfigError, RunConfig};
use crate::envmdp::{EnvSetup, SoftArmEnv};
use crate::evalharness::{
    compute_metrics, export_report, extreme_goals, payload_sweep, run_episodes, EpisodePlan, EvalEpisode, EvalError,
    GridOraclePolicy, Metrics, Pipeline, Policy, RandomPolicy, SacPolicy, TestPointSet,
};
use crate::localctl::{servo_to, write_servo_csv, PlantModel};
use crate::rodkin::{estimate_config, forward_pose_with_length, ArmConfig, RodParams};
use crate::sac::{config_hash, load_checkpoint, save_checkpoint, train, write_curve_csv, Checkpoint, CheckpointError};
use crate::sac::train::write_evals_csv;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Checkpoint(_) | CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        runtime(e)
    }
}

/// Config file plus command-line overrides.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))
}

fn write_file(path: &Path, f: impl FnOnce(fs::File) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    f(file).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CURVE_CSV: &str = "curve.csv";
pub const EVALS_CSV: &str = "evals.csv";

/// Train SAC; writes `checkpoint.json`, `curve.csv` and `evals.csv` to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let setup = cfg.env_setup();
    let mut env = SoftArmEnv::new(setup.clone()).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))?;
    create_out(out)?;
    let tc = cfg.train_config();
    let report = train(&mut env, &tc, |e| {
        log::info!("step {:>7}  eval success {:.3}  mean steps {:.2}", e.step, e.success_rate, e.mean_steps);
    })
    .map_err(runtime)?;
    let ckpt = Checkpoint::from_agent(&report.agent, report.normalizer, config_hash(&setup));
    save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(CURVE_CSV), |f| write_curve_csv(f, &report.curve))?;
    write_file(&out.join(EVALS_CSV), |f| write_evals_csv(f, &report.evals))?;
    match report.evals.last() {
        Some(e) => println!("trained {} steps; final eval success {:.3}, mean steps {:.2}", tc.total_steps, e.success_rate, e.mean_steps),
        None => println!("trained 0 steps; wrote initial checkpoint"),
    }
    Ok(())
}

/// Policy selection for `eval` and `rollout`.
#[derive(Debug, Clone)]
pub enum PolicySource {
    Checkpoint(PathBuf),
    Random,
    Oracle,
}

#[derive(Debug, Clone)]
enum AnyPolicy {
    Sac(SacPolicy),
    Random(RandomPolicy),
    Oracle(GridOraclePolicy),
}

impl Policy for AnyPolicy {
    fn begin_episode(&mut self, seed: u64) {
        match self {
            AnyPolicy::Sac(p) => p.begin_episode(seed),
            AnyPolicy::Random(p) => p.begin_episode(seed),
            AnyPolicy::Oracle(p) => p.begin_episode(seed),
        }
    }

    fn act(&mut self, env: &SoftArmEnv, state: &crate::envmdp::StateVector) -> crate::envmdp::Action {
        match self {
            AnyPolicy::Sac(p) => p.act(env, state),
            AnyPolicy::Random(p) => p.act(env, state),
            AnyPolicy::Oracle(p) => p.act(env, state),
        }
    }
}

fn build_policy(source: &PolicySource, cfg: &RunConfig, setup: &EnvSetup) -> Result<AnyPolicy, CliError> {
    Ok(match source {
        PolicySource::Checkpoint(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.ensure_compatible(setup)?;
            AnyPolicy::Sac(SacPolicy { agent: ckpt.to_agent(), normalizer: ckpt.normalizer })
        }
        PolicySource::Random => AnyPolicy::Random(RandomPolicy::new()),
        PolicySource::Oracle => AnyPolicy::Oracle(
            GridOraclePolicy::new(setup, cfg.eval.oracle_grid).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))?,
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    PureSim,
    DeploySim,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub policy: PolicySource,
    pub mode: EvalMode,
    /// Fixed test points with repeated trials instead of randomized episodes.
    pub points: bool,
    pub payload_sweep: bool,
    pub workers: usize,
    pub threshold_px: Option<f64>,
    pub plant: Option<PathBuf>,
}

fn plan_for(cfg: &RunConfig, setup: &EnvSetup, points: bool) -> Result<EpisodePlan, CliError> {
    if points {
        let set = TestPointSet::generate(setup, &cfg.eval.bands, cfg.eval.test_points, cfg.eval.trials, cfg.eval.point_seed ^ cfg.seed)
            .map_err(runtime)?;
        Ok(EpisodePlan::Points { set, seed: cfg.eval.episode_seed ^ cfg.seed })
    } else {
        Ok(EpisodePlan::randomized(cfg.eval.episode_seed ^ cfg.seed, cfg.eval.episodes))
    }
}

fn print_metrics(label: &str, m: &Metrics) {
    let rates: Vec<String> = m.success_rates.iter().map(|(t, r)| format!("{t:.0}px {r:.3}")).collect();
    println!("{label}: {} episodes; success {}", m.episodes, rates.join(", "));
    let steps = match (m.mean_steps_to_goal, m.median_steps_to_goal) {
        (Some(a), Some(b)) => format!("mean {a:.2} / median {b:.1}"),
        _ => "n/a".into(),
    };
    let rep = m.repeatability.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into());
    println!("{label}: steps-to-goal {steps}; repeatability {rep}; never visible {}", m.never_visible);
}

/// Evaluate a policy; writes the report files to `out`.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<(), CliError> {
    let setup = cfg.env_setup();
    let policy = build_policy(&args.policy, cfg, &setup)?;
    let plant = match &args.plant {
        Some(p) => PlantModel::load(p).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))?,
        None => cfg.plant,
    };
    let reporting = args.threshold_px.unwrap_or(cfg.eval.reporting_threshold_px);
    if !(reporting > 0.0) {
        return Err(CliError::Usage("--threshold must be positive".into()));
    }
    let mut thresholds = cfg.eval.thresholds_px.clone();
    if !thresholds.contains(&reporting) {
        thresholds.push(reporting);
    }
    let plan = plan_for(cfg, &setup, args.points)?;
    create_out(out)?;

    if args.payload_sweep {
        let goals = extreme_goals(&setup, &plant, cfg.eval.extreme_goals);
        let results = payload_sweep(&policy, &setup, &plant, &cfg.eval.payloads_g, &cfg.servo, &plan, &goals, &thresholds, reporting, args.workers)?;
        let path = out.join("payload_sweep.csv");
        write_file(&path, |f| {
            let mut w = csv::Writer::from_writer(f);
            w.write_record(["payload_g", "episodes", "success_rate", "saturated_failures", "extreme_saturated", "extreme_goals"])?;
            for r in &results {
                w.write_record([
                    format!("{:.1}", r.payload_g),
                    r.metrics.episodes.to_string(),
                    format!("{:.6}", r.metrics.success_at(reporting).unwrap_or(0.0)),
                    r.saturated_failures.to_string(),
                    r.extreme_saturated.to_string(),
                    r.extreme_goals.to_string(),
                ])?;
            }
            w.flush()
        })?;
        for r in &results {
            println!(
                "payload {:>4.1} g: success@{reporting:.0}px {:.3}; saturated failures {}; extreme goals saturated {}/{}",
                r.payload_g,
                r.metrics.success_at(reporting).unwrap_or(0.0),
                r.saturated_failures,
                r.extreme_saturated,
                r.extreme_goals
            );
        }
        return Ok(());
    }

    let pipeline = match args.mode {
        EvalMode::PureSim => Pipeline::PureSim,
        EvalMode::DeploySim => Pipeline::DeploySim { plant, servo: cfg.servo },
    };
    let episodes = run_episodes(&policy, &setup, &pipeline, &plan, args.workers)?;
    let metrics = compute_metrics(&episodes, &thresholds, reporting, &cfg.eval.histogram)?;
    export_report(&metrics, &episodes, out)?;
    print_metrics("eval", &metrics);
    Ok(())
}

/// Recompute metrics and report files from a saved `episodes.jsonl`.
pub fn cmd_report(cfg: &RunConfig, episodes_path: &Path, threshold_px: Option<f64>, out: &Path) -> Result<(), CliError> {
    let file = fs::File::open(episodes_path).map_err(|e| runtime(format!("cannot read {}: {e}", episodes_path.display())))?;
    let mut episodes: Vec<EvalEpisode> = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        episodes.push(
            serde_json::from_str(&line).map_err(|e| runtime(format!("{}:{}: {e}", episodes_path.display(), i + 1)))?,
        );
    }
    let reporting = threshold_px.unwrap_or(cfg.eval.reporting_threshold_px);
    let mut thresholds = cfg.eval.thresholds_px.clone();
    if !thresholds.contains(&reporting) {
        thresholds.push(reporting);
    }
    let metrics = if episodes.is_empty() {
        Metrics::empty(&thresholds, reporting, &cfg.eval.histogram)
    } else {
        compute_metrics(&episodes, &thresholds, reporting, &cfg.eval.histogram)?
    };
    export_report(&metrics, &episodes, out)?;
    print_metrics("report", &metrics);
    Ok(())
}

/// Print one episode step by step.
pub fn cmd_rollout(cfg: &RunConfig, policy: &PolicySource, seed: u64) -> Result<(), CliError> {
    let setup = cfg.env_setup();
    let mut policy = build_policy(policy, cfg, &setup)?;
    let mut env = SoftArmEnv::new(setup).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))?;
    let mut state = env.reset(seed).map_err(runtime)?;
    let t = env.target();
    let c = env.config();
    println!("seed {seed}: target [{:.4}, {:.4}, {:.4}] m; start kappa {:.3} tau {:.3}", t.x, t.y, t.z, c.kappa, c.tau);
    policy.begin_episode(seed);
    loop {
        let action = policy.act(&env, &state).clamped();
        let step = env.step(action).map_err(runtime)?;
        let r = step.info.reward;
        let c = env.config();
        let d = step.info.centering_error_px.map(|d| format!("{d:.1}px")).unwrap_or_else(|| "not visible".into());
        println!(
            "step {}: action [{:+.3}, {:+.3}] -> kappa {:.3} tau {:.3}; d_i {d}; reward {:.3} (r_d {:.3} r_a {:.3} r_i {:.3} r_c {:.0} r_p {:.0})",
            step.info.steps, action.dk, action.dt, c.kappa, c.tau, step.reward, r.r_d, r.r_a, r.r_i, r.r_c, r.r_p
        );
        state = step.state;
        if step.done {
            if step.info.success {
                println!("success in {} steps", step.info.steps);
            } else {
                println!("timed out after {} steps", step.info.steps);
            }
            return Ok(());
        }
    }
}

/// Run the local controller to one goal and print the trace.
pub fn cmd_servo_test(cfg: &RunConfig, goal: ArmConfig, plant: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let plant = match plant {
        Some(p) => PlantModel::load(p).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))?,
        None => cfg.plant,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let result = servo_to(goal, &plant, &cfg.rod, &cfg.servo, &mut rng).map_err(runtime)?;
    for r in &result.history {
        println!(
            "iter {:>2}: b {:7.2} r1 {:7.2} r2 {:7.2} kPa; estimate kappa {:7.4} tau {:7.4}; error {:+.4} {:+.4}",
            r.iter, r.actuation.b, r.actuation.r1, r.actuation.r2, r.estimate.kappa, r.estimate.tau, r.err_kappa, r.err_tau
        );
    }
    println!(
        "{} after {} iteration(s); final error ({:+.4}, {:+.4}){}{}",
        if result.converged { "converged" } else { "not converged" },
        result.iterations,
        result.final_error.0,
        result.final_error.1,
        if result.saturated { "; saturated" } else { "" },
        if result.goal_clamped { "; goal outside plant reach" } else { "" },
    );
    if let Some(out) = out {
        create_out(out)?;
        write_file(&out.join("servo.csv"), |f| write_servo_csv(f, &result))?;
    }
    Ok(())
}

/// Print the pose at arc length `s` and the configuration recovered from it.
pub fn cmd_fk(kappa: f64, tau: f64, s: f64, length: f64) -> Result<(), CliError> {
    let c = ArmConfig::new(kappa, tau).map_err(|e| CliError::Usage(e.to_string()))?;
    let p = forward_pose_with_length(c, s, length).map_err(|e| CliError::Usage(e.to_string()))?;
    let recovered = if s > 0.0 {
        estimate_config(&p, &RodParams { length: s, ..RodParams::default() }).ok()
    } else {
        None
    };
    let q = p.quaternion_wxyz();
    println!("position [{:.9}, {:.9}, {:.9}]", p.position.x, p.position.y, p.position.z);
    println!("quaternion_wxyz [{:.9}, {:.9}, {:.9}, {:.9}]", q[0], q[1], q[2], q[3]);
    for i in 0..3 {
        let r = p.orientation.row(i);
        println!("R[{i}] [{:.9}, {:.9}, {:.9}]", r[0], r[1], r[2]);
    }
    match recovered {
        Some(e) => println!("estimated kappa {:.9} tau {:.9} (residual {:.2e})", e.config.kappa, e.config.tau, e.residual),
        None => println!("estimated configuration unavailable at this arc length"),
    }
    Ok(())
}
