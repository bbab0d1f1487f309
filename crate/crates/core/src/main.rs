use clap::{Parser, Subcommand, ValueEnum};
use softservo::commands::{
    cmd_eval, cmd_fk, cmd_report, cmd_rollout, cmd_servo_test, cmd_train, load_config, CliError, EvalArgs, EvalMode,
    PolicySource,
};
use softservo::rodkin::ArmConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "softservo", version, about = "Visual servoing of a simulated bend-and-twist soft arm")]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    PureSim,
    DeploySim,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyKind {
    Sac,
    Random,
    Oracle,
}

#[derive(Debug, clap::Args)]
struct PolicyArgs {
    /// Policy to run.
    #[arg(long, value_enum, default_value_t = PolicyKind::Sac)]
    policy: PolicyKind,
    /// Checkpoint written by `train` (required for the SAC policy).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl PolicyArgs {
    fn source(&self) -> Result<PolicySource, CliError> {
        match (self.policy, &self.checkpoint) {
            (PolicyKind::Sac, Some(p)) => Ok(PolicySource::Checkpoint(p.clone())),
            (PolicyKind::Sac, None) => Err(CliError::Usage("--checkpoint is required for --policy sac".into())),
            (PolicyKind::Random, _) => Ok(PolicySource::Random),
            (PolicyKind::Oracle, _) => Ok(PolicySource::Oracle),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train SAC and write checkpoint.json, curve.csv and evals.csv.
    Train {
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a policy and write scatter/histogram/region CSVs and summary.json.
    Eval {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, value_enum, default_value_t = Mode::PureSim)]
        mode: Mode,
        /// Use fixed test points with repeated trials instead of randomized episodes.
        #[arg(long)]
        points: bool,
        /// Run the deployment pipeline once per configured payload.
        #[arg(long)]
        payload_sweep: bool,
        /// Plant TOML for deploy-sim; the config's plant when omitted.
        #[arg(long)]
        plant: Option<PathBuf>,
        /// Worker threads for episode evaluation.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Reporting threshold in pixels for repeatability and regions.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Print one episode step by step.
    Rollout {
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Drive the local controller to a goal configuration.
    ServoTest {
        #[arg(allow_negative_numbers = true)]
        kappa: f64,
        #[arg(allow_negative_numbers = true)]
        tau: f64,
        /// Plant TOML; the config's plant when omitted.
        #[arg(long)]
        plant: Option<PathBuf>,
        /// Directory for servo.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward kinematics at arc length s, with the configuration recovered from the pose.
    Fk {
        #[arg(allow_negative_numbers = true)]
        kappa: f64,
        #[arg(allow_negative_numbers = true)]
        tau: f64,
        /// Arc length in m; the rod length when omitted.
        s: Option<f64>,
    },
    /// Recompute metrics and report files from a saved episodes.jsonl.
    Report {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Train { out } => cmd_train(&cfg, &out),
        Command::Eval { policy, mode, points, payload_sweep, plant, workers, threshold, out } => {
            let args = EvalArgs {
                policy: policy.source()?,
                mode: match mode {
                    Mode::PureSim => EvalMode::PureSim,
                    Mode::DeploySim => EvalMode::DeploySim,
                },
                points,
                payload_sweep,
                workers: workers.max(1),
                threshold_px: threshold,
                plant,
            };
            cmd_eval(&cfg, &args, &out)
        }
        Command::Rollout { policy } => cmd_rollout(&cfg, &policy.source()?, cfg.seed),
        Command::ServoTest { kappa, tau, plant, out } => {
            let goal = ArmConfig::new(kappa, tau).map_err(|e| CliError::Usage(e.to_string()))?;
            cmd_servo_test(&cfg, goal, plant.as_deref(), out.as_deref())
        }
        Command::Fk { kappa, tau, s } => cmd_fk(kappa, tau, s.unwrap_or(cfg.rod.length), cfg.rod.length),
        Command::Report { episodes, threshold, out } => cmd_report(&cfg, &episodes, threshold, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
