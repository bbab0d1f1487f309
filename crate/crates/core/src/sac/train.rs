use super::agent::{SacAgent, SacError, SacHyper, UpdateLosses};
use super::replay::{ReplayBuffer, Transition};
use crate::envmdp::{Action, EnvError, Normalizer, SoftArmEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Uniform-random actions before the policy takes over.
    pub warmup_steps: u64,
    pub buffer_capacity: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// First reset seed of the fixed evaluation episodes.
    pub eval_seed: u64,
    pub seed: u64,
    pub sac: SacHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 150_000,
            warmup_steps: 1_000,
            buffer_capacity: 100_000,
            eval_every: 5_000,
            eval_episodes: 200,
            eval_seed: 1_000_000,
            seed: 0,
            sac: SacHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.sac.validate()?;
        if self.buffer_capacity < self.sac.batch_size {
            return Err("buffer_capacity must hold at least one batch".into());
        }
        if self.eval_every == 0 {
            return Err("eval_every must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub episode_return: f64,
    pub eval_success: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub success_rate: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurveRow>,
    pub evals: Vec<EvalPoint>,
    pub last_losses: Option<UpdateLosses>,
    pub agent: SacAgent,
    pub normalizer: Normalizer,
}

/// Deterministic-policy success rate over reset seeds `first_seed..first_seed+episodes`.
pub fn evaluate_deterministic(
    agent: &SacAgent,
    env: &mut SoftArmEnv,
    first_seed: u64,
    episodes: usize,
) -> Result<(f64, f64), EnvError> {
    let norm = env.normalizer();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let mut successes = 0usize;
    let mut steps = 0usize;
    for k in 0..episodes {
        let mut s = env.reset(first_seed + k as u64)?;
        loop {
            let a = agent.act(&norm.apply(&s), true, &mut dummy);
            let step = env.step(a)?;
            s = step.state;
            if step.done {
                if step.info.success {
                    successes += 1;
                    steps += step.info.steps;
                }
                break;
            }
        }
    }
    let rate = if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 };
    let mean_steps = if successes == 0 { 0.0 } else { steps as f64 / successes as f64 };
    Ok((rate, mean_steps))
}

/// Run SAC on `env`. Every random draw (reset seeds, exploration, minibatches,
/// network init) comes from one generator seeded by `cfg.seed`.
pub fn train(
    env: &mut SoftArmEnv,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalPoint),
) -> Result<TrainReport, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = SacAgent::new(cfg.sac.clone(), &mut rng);
    let norm = env.normalizer();
    let mut eval_env = env.clone();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut curve = Vec::new();
    let mut evals = Vec::new();
    let mut last_losses = None;
    let mut latest_eval: Option<f64> = None;

    if cfg.total_steps > 0 {
        let mut obs = norm.apply(&env.reset(rng.gen())?);
        let mut ep_return = 0.0;
        for t in 1..=cfg.total_steps {
            let action = if t <= cfg.warmup_steps {
                Action::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0))
            } else {
                agent.act(&obs, false, &mut rng)
            };
            let step = env.step(action)?;
            let next = norm.apply(&step.state);
            ep_return += step.reward;
            buffer.push(Transition {
                state: obs,
                action: action.clamped().to_array(),
                reward: step.reward,
                next_state: next,
                done: step.info.success,
            });
            obs = next;
            if step.done {
                curve.push(CurveRow { step: t, episode_return: ep_return, eval_success: latest_eval });
                ep_return = 0.0;
                obs = norm.apply(&env.reset(rng.gen())?);
            }
            if t > cfg.warmup_steps && buffer.len() >= cfg.sac.batch_size {
                let batch = buffer.sample(cfg.sac.batch_size, &mut rng);
                last_losses = Some(agent.update(&batch, &mut rng)?);
            }
            if t % cfg.eval_every == 0 || t == cfg.total_steps {
                let (rate, mean_steps) = evaluate_deterministic(&agent, &mut eval_env, cfg.eval_seed, cfg.eval_episodes)?;
                let point = EvalPoint { step: t, success_rate: rate, mean_steps };
                on_eval(&point);
                evals.push(point);
                latest_eval = Some(rate);
            }
        }
    }
    Ok(TrainReport { curve, evals, last_losses, agent, normalizer: norm })
}

/// Learning curve as `step,episode_return,eval_success`.
pub fn write_curve_csv<W: Write>(out: W, curve: &[CurveRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "episode_return", "eval_success"])?;
    for r in curve {
        w.write_record([
            r.step.to_string(),
            format!("{:.6}", r.episode_return),
            r.eval_success.map(|v| format!("{v:.4}")).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

pub fn write_evals_csv<W: Write>(out: W, evals: &[EvalPoint]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "success_rate", "mean_steps"])?;
    for e in evals {
        w.write_record([e.step.to_string(), format!("{:.4}", e.success_rate), format!("{:.4}", e.mean_steps)])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmdp::EnvSetup;

    fn small() -> TrainConfig {
        TrainConfig {
            total_steps: 400,
            warmup_steps: 100,
            buffer_capacity: 1000,
            eval_every: 200,
            eval_episodes: 5,
            sac: SacHyper { hidden: vec![16, 16], batch_size: 32, ..SacHyper::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initial_agent() {
        let mut env = SoftArmEnv::new(EnvSetup::default()).unwrap();
        let cfg = TrainConfig { total_steps: 0, ..small() };
        let report = train(&mut env, &cfg, |_| {}).unwrap();
        assert!(report.curve.is_empty() && report.evals.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = SacAgent::new(cfg.sac.clone(), &mut rng);
        assert_eq!(report.agent.actor, fresh.actor);
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let run = || {
            let mut env = SoftArmEnv::new(EnvSetup::default()).unwrap();
            let r = train(&mut env, &small(), |_| {}).unwrap();
            let mut buf = Vec::new();
            write_curve_csv(&mut buf, &r.curve).unwrap();
            (buf, r.agent.actor)
        };
        let (a, wa) = run();
        let (b, wb) = run();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("step,episode_return,eval_success\n"));
    }

    #[test]
    fn evaluation_cadence() {
        let mut env = SoftArmEnv::new(EnvSetup::default()).unwrap();
        let mut seen = Vec::new();
        let r = train(&mut env, &TrainConfig { total_steps: 450, ..small() }, |e| seen.push(e.step)).unwrap();
        assert_eq!(seen, vec![200, 400, 450]);
        assert_eq!(r.evals.len(), 3);
    }

    #[test]
    fn rejects_bad_config() {
        let mut env = SoftArmEnv::new(EnvSetup::default()).unwrap();
        let cfg = TrainConfig { sac: SacHyper { gamma: 1.0, ..SacHyper::default() }, ..small() };
        assert!(matches!(train(&mut env, &cfg, |_| {}), Err(TrainError::Config(_))));
    }
}
