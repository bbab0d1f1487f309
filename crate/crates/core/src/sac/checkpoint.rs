//! Self-describing JSON checkpoints.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! exact round-tripping, so save→load is bit-exact.

use super::agent::{SacAgent, SacHyper};
use super::mlp::Mlp;
use crate::envmdp::{EnvSetup, Normalizer, ACTION_DIM, STATE_DIM};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &str = "SOFTSERVO-SAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic(String),
    #[error("unsupported checkpoint version {found}, expected {CHECKPOINT_VERSION}")]
    Version { found: u32 },
    #[error("checkpoint is for state_dim={state_dim}, action_dim={action_dim}; expected {STATE_DIM}/{ACTION_DIM}")]
    Dimensions { state_dim: usize, action_dim: usize },
    #[error("checkpoint config hash {found} does not match current environment config {expected}")]
    ConfigMismatch { found: String, expected: String },
}

/// SHA-256 of the canonical JSON of everything that defines the observation.
pub fn config_hash(setup: &EnvSetup) -> String {
    let json = serde_json::to_string(setup).expect("env setup serialises");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.update(STATE_DIM.to_le_bytes());
    h.update(ACTION_DIM.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub config_hash: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub normalizer: Normalizer,
    pub hyper: SacHyper,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_alpha: f64,
}

impl Checkpoint {
    pub fn from_agent(agent: &SacAgent, normalizer: Normalizer, config_hash: String) -> Self {
        Checkpoint {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            config_hash,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            normalizer,
            hyper: agent.hyper.clone(),
            actor: agent.actor.clone(),
            critic1: agent.critic1.clone(),
            critic2: agent.critic2.clone(),
            target1: agent.target1.clone(),
            target2: agent.target2.clone(),
            log_alpha: agent.log_alpha,
        }
    }

    pub fn to_agent(&self) -> SacAgent {
        let mut agent = SacAgent::from_parts(
            self.hyper.clone(),
            self.actor.clone(),
            self.critic1.clone(),
            self.critic2.clone(),
            self.log_alpha,
        );
        agent.target1 = self.target1.clone();
        agent.target2 = self.target2.clone();
        agent
    }

    /// Refuse a checkpoint trained against a different environment config.
    pub fn ensure_compatible(&self, setup: &EnvSetup) -> Result<(), CheckpointError> {
        let expected = config_hash(setup);
        if self.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch { found: self.config_hash.clone(), expected });
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CheckpointError> {
        if self.magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(self.magic.clone()));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: self.version });
        }
        if self.state_dim != STATE_DIM || self.action_dim != ACTION_DIM {
            return Err(CheckpointError::Dimensions { state_dim: self.state_dim, action_dim: self.action_dim });
        }
        let shapes_ok = self.actor.sizes() == self.hyper.actor_sizes().as_slice()
            && [&self.critic1, &self.critic2, &self.target1, &self.target2]
                .iter()
                .all(|c| c.sizes() == self.hyper.critic_sizes().as_slice());
        if !shapes_ok {
            return Err(CheckpointError::Malformed("layer shapes disagree with hyperparameters".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let json = serde_json::to_string(ckpt).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    fs::write(path, json).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let magic = value.get("magic").and_then(|m| m.as_str()).unwrap_or_default();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_string()));
    }
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    ckpt.validate()?;
    Ok(ckpt)
}
