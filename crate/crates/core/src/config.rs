//! Run configuration: one TOML file holds every constant used by a run.

use crate::envmdp::{EnvConfig, EnvSetup};
use crate::evalharness::{HistogramSpec, RegionBands};
use crate::localctl::{PlantModel, ServoSettings};
use crate::rodkin::RodParams;
use crate::sac::TrainConfig;
use crate::vision::{BaseCameraPlacement, Intrinsics};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Randomized episodes for `eval` without test points.
    pub episodes: usize,
    /// First reset seed of the randomized episodes.
    pub episode_seed: u64,
    pub thresholds_px: Vec<f64>,
    pub reporting_threshold_px: f64,
    pub test_points: usize,
    pub trials: usize,
    pub point_seed: u64,
    pub bands: RegionBands,
    pub histogram: HistogramSpec,
    pub payloads_g: Vec<f64>,
    pub extreme_goals: usize,
    /// Grid resolution per axis of the oracle policy.
    pub oracle_grid: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            episodes: 500,
            episode_seed: 2_000_000,
            thresholds_px: vec![100.0, 150.0, 200.0],
            reporting_threshold_px: 100.0,
            test_points: 50,
            trials: 2,
            point_seed: 7,
            bands: RegionBands::default(),
            histogram: HistogramSpec::default(),
            payloads_g: vec![0.0, 10.0, 15.0, 20.0],
            extreme_goals: 20,
            oracle_grid: 97,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<(), String> {
        if self.thresholds_px.is_empty() || self.thresholds_px.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err("eval.thresholds_px must be non-empty and positive".into());
        }
        if !(self.reporting_threshold_px > 0.0) {
            return Err("eval.reporting_threshold_px must be positive".into());
        }
        if self.trials < 2 {
            return Err("eval.trials must be >= 2 for repeatability".into());
        }
        for (name, e) in [("distance", &self.bands.distance_edges), ("height", &self.bands.height_edges)] {
            if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(format!("eval.bands.{name}_edges must be >= 2 increasing values"));
            }
        }
        if !(self.histogram.bin_px > 0.0 && self.histogram.max_px >= self.histogram.bin_px) {
            return Err("eval.histogram needs 0 < bin_px <= max_px".into());
        }
        if self.payloads_g.iter().any(|p| !(*p >= 0.0)) {
            return Err("eval.payloads_g must be non-negative".into());
        }
        if self.oracle_grid < 2 {
            return Err("eval.oracle_grid must be >= 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rod: RodParams,
    pub intrinsics: Intrinsics,
    pub base_camera: BaseCameraPlacement,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub plant: PlantModel,
    pub servo: ServoSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            rod: RodParams::default(),
            intrinsics: Intrinsics::default(),
            base_camera: BaseCameraPlacement::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            plant: PlantModel::default(),
            servo: ServoSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: "<string>".into(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rod.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.intrinsics.validate().map_err(ConfigError::Invalid)?;
        self.env.validate().map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        self.plant.validate().map_err(ConfigError::Invalid)?;
        if !(self.servo.tol_kappa > 0.0 && self.servo.tol_tau > 0.0 && self.servo.max_iters >= 1) {
            return Err(ConfigError::Invalid("servo tolerances must be positive and max_iters >= 1".into()));
        }
        if !(self.servo.gain > 0.0 && self.servo.gain <= 1.0) {
            return Err(ConfigError::Invalid("servo.gain must be in (0, 1]".into()));
        }
        self.eval.validate().map_err(ConfigError::Invalid)
    }

    pub fn env_setup(&self) -> EnvSetup {
        EnvSetup { rod: self.rod, intrinsics: self.intrinsics, base_camera: self.base_camera, env: self.env.clone() }
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(ConfigError::Parse { .. })));
        assert!(matches!(RunConfig::from_toml("[env]\nmax_step = 3"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(RunConfig::from_toml("[eval]\ntrials = 1"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[rod]\nlength = -1.0"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[train]\ntotal_steps = 10").unwrap();
        assert_eq!(c.train_config().seed, 4);
        assert_eq!(c.train.total_steps, 10);
        assert_eq!(c.train.warmup_steps, TrainConfig::default().warmup_steps);
    }
}
