//! From-scratch Soft Actor-Critic.

pub mod agent;
pub mod checkpoint;
pub mod mlp;
pub mod replay;
pub mod train;

pub use agent::{SacAgent, SacError, SacHyper, UpdateLosses};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use mlp::{Adam, AdamConfig, Mlp};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use train::{evaluate_deterministic, train, write_curve_csv, CurveRow, EvalPoint, TrainConfig, TrainError, TrainReport};
