//! Deployment-side local controller.
//!
//! A synthetic actuation→configuration plant stands in for the pneumatic
//! hardware. The controller starts from a general (nominal) inverse map and
//! iterates estimate → correct → apply until the measured strains reach the
//! goal.

use crate::rodkin::{estimate_config_robust, tip_pose, ArmConfig, KinematicsError, Pose, RodParams};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServoError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("invalid plant: {0}")]
    Plant(String),
    #[error("cannot read plant file {path}: {msg}")]
    File { path: String, msg: String },
}

/// Chamber pressures in kPa: one bending, two counter-rotating.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Actuation {
    pub b: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Actuation {
    pub fn zero() -> Self {
        Actuation::default()
    }

    fn add(&self, d: &Actuation) -> Actuation {
        Actuation { b: self.b + d.b, r1: self.r1 + d.r1, r2: self.r2 + d.r2 }
    }

    fn sub(&self, d: &Actuation) -> Actuation {
        Actuation { b: self.b - d.b, r1: self.r1 - d.r1, r2: self.r2 - d.r2 }
    }

    pub fn clamped(&self, p_max: f64) -> Actuation {
        let c = |x: f64| x.clamp(0.0, p_max);
        Actuation { b: c(self.b), r1: c(self.r1), r2: c(self.r2) }
    }

    pub fn max_component(&self) -> f64 {
        self.b.max(self.r1).max(self.r2)
    }
}

/// Synthetic plant:
///
/// `κ = bias_b·gain_bend·tanh(b/p_bend)·kappa_cap − droop_per_g·payload_g`
/// `τ = gain_rot·(bias_r1·tanh(r1/p_rot) − bias_r2·tanh(r2/p_rot))·tau_cap`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantModel {
    pub gain_bend: f64,
    pub gain_rot: f64,
    pub bias_b: f64,
    pub bias_r1: f64,
    pub bias_r2: f64,
    /// Tip payload in grams.
    pub payload_g: f64,
    /// Curvature lost per gram of payload, 1/m per g.
    pub droop_per_g: f64,
    /// Pressure limit in kPa.
    pub p_max: f64,
    pub p_bend: f64,
    pub p_rot: f64,
    pub kappa_cap: f64,
    pub tau_cap: f64,
}

impl Default for PlantModel {
    fn default() -> Self {
        PlantModel {
            gain_bend: 1.0,
            gain_rot: 1.0,
            bias_b: 1.0,
            bias_r1: 1.0,
            bias_r2: 1.0,
            payload_g: 0.0,
            droop_per_g: 0.02,
            p_max: 210.0,
            p_bend: 100.0,
            p_rot: 100.0,
            kappa_cap: 12.0,
            tau_cap: 12.0,
        }
    }
}

impl PlantModel {
    /// Same gains and limits with unit biases and no payload.
    pub fn nominal(&self) -> PlantModel {
        PlantModel { bias_b: 1.0, bias_r1: 1.0, bias_r2: 1.0, payload_g: 0.0, ..*self }
    }

    pub fn with_biases(self, bias_b: f64, bias_r1: f64, bias_r2: f64) -> PlantModel {
        PlantModel { bias_b, bias_r1, bias_r2, ..self }
    }

    pub fn with_payload(self, payload_g: f64) -> PlantModel {
        PlantModel { payload_g, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("gain_bend", self.gain_bend),
            ("gain_rot", self.gain_rot),
            ("bias_b", self.bias_b),
            ("bias_r1", self.bias_r1),
            ("bias_r2", self.bias_r2),
            ("p_max", self.p_max),
            ("p_bend", self.p_bend),
            ("p_rot", self.p_rot),
            ("kappa_cap", self.kappa_cap),
            ("tau_cap", self.tau_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.payload_g >= 0.0 && self.droop_per_g >= 0.0) {
            return Err("payload_g and droop_per_g must be non-negative".into());
        }
        Ok(())
    }

    /// Largest curvature / torsion magnitude the nominal plant can produce.
    pub fn nominal_reach(&self) -> (f64, f64) {
        (
            self.gain_bend * self.kappa_cap * (self.p_max / self.p_bend).tanh(),
            self.gain_rot * self.tau_cap * (self.p_max / self.p_rot).tanh(),
        )
    }

    /// Reach of this (possibly biased, loaded) plant: `(κ_max, τ_max⁺, τ_max⁻)`.
    pub fn reach(&self) -> (f64, f64, f64) {
        let (k, t) = self.nominal_reach();
        (self.bias_b * k - self.droop_per_g * self.payload_g, self.bias_r1 * t, self.bias_r2 * t)
    }

    pub fn load(path: &Path) -> Result<PlantModel, ServoError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServoError::File { path: path.display().to_string(), msg: e.to_string() })?;
        let plant: PlantModel =
            toml::from_str(&text).map_err(|e| ServoError::File { path: path.display().to_string(), msg: e.to_string() })?;
        plant.validate().map_err(ServoError::Plant)?;
        Ok(plant)
    }
}

pub fn plant_apply(act: &Actuation, plant: &PlantModel) -> ArmConfig {
    let a = act.clamped(plant.p_max);
    let kappa = plant.bias_b * plant.gain_bend * (a.b / plant.p_bend).tanh() * plant.kappa_cap
        - plant.droop_per_g * plant.payload_g;
    let tau = plant.gain_rot
        * (plant.bias_r1 * (a.r1 / plant.p_rot).tanh() - plant.bias_r2 * (a.r2 / plant.p_rot).tanh())
        * plant.tau_cap;
    ArmConfig { kappa, tau }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappedActuation {
    pub actuation: Actuation,
    /// The goal was outside the nominal reachable set and was clamped.
    pub clamped: bool,
}

/// Inverse of the nominal plant. Torsion uses a single rotation chamber,
/// chosen by the sign of the goal.
pub fn general_map(goal: ArmConfig, plant: &PlantModel) -> MappedActuation {
    let nom = plant.nominal();
    let (b, cb) = invert_channel(goal.kappa / (nom.gain_bend * nom.kappa_cap), nom.p_bend, nom.p_max);
    let (r, cr) = invert_channel(goal.tau.abs() / (nom.gain_rot * nom.tau_cap), nom.p_rot, nom.p_max);
    let (r1, r2) = if goal.tau >= 0.0 { (r, 0.0) } else { (0.0, r) };
    MappedActuation { actuation: Actuation { b, r1, r2 }, clamped: cb || cr }
}

/// Solve `tanh(p/scale) = x` for `p ∈ [0, p_max]`.
fn invert_channel(x: f64, scale: f64, p_max: f64) -> (f64, bool) {
    if x <= 0.0 {
        return (0.0, x < 0.0);
    }
    let top = (p_max / scale).tanh();
    if x >= top {
        return (p_max, x > top);
    }
    ((scale * x.atanh()).min(p_max), false)
}

/// Proportional correction gain applied to the configuration error.
pub const DEFAULT_CORRECTION_GAIN: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub delta: Actuation,
    /// The corrected command hit the pressure limits.
    pub saturated: bool,
}

/// One heuristic correction from the current actuation.
///
/// The error is scaled by `gain` and converted to pressure through the
/// nominal map's secant over the step: the new command is the nominal inverse
/// of `nominal(current) + gain·(goal − estimated)`, per channel. A channel with
/// zero error is left untouched.
pub fn correction_step(
    goal: ArmConfig,
    estimated: ArmConfig,
    current: &Actuation,
    plant: &PlantModel,
    gain: f64,
) -> Correction {
    let nom = plant.nominal();
    let ek = goal.kappa - estimated.kappa;
    let et = goal.tau - estimated.tau;
    let believed = plant_apply(current, &nom);
    let command = ArmConfig { kappa: believed.kappa + gain * ek, tau: believed.tau + gain * et };
    let mapped = general_map(command, &nom);
    let mut next = *current;
    let mut saturated = false;
    if ek != 0.0 {
        next.b = mapped.actuation.b;
        let (_, clamped) = invert_channel(command.kappa / (nom.gain_bend * nom.kappa_cap), nom.p_bend, nom.p_max);
        saturated |= clamped;
    }
    if et != 0.0 {
        next.r1 = mapped.actuation.r1;
        next.r2 = mapped.actuation.r2;
        let (_, clamped) = invert_channel(command.tau.abs() / (nom.gain_rot * nom.tau_cap), nom.p_rot, nom.p_max);
        saturated |= clamped;
    }
    Correction { delta: next.sub(current), saturated }
}

/// Polhemus-like tip tracker: true pose plus Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TipSensor {
    pub sigma_pos_m: f64,
    pub sigma_rot_deg: f64,
}

impl Default for TipSensor {
    fn default() -> Self {
        TipSensor { sigma_pos_m: 0.001, sigma_rot_deg: 0.5 }
    }
}

impl TipSensor {
    pub fn noiseless() -> Self {
        TipSensor { sigma_pos_m: 0.0, sigma_rot_deg: 0.0 }
    }

    pub fn measure<R: Rng + ?Sized>(&self, tip: &Pose, rng: &mut R) -> Pose {
        let mut out = *tip;
        if self.sigma_pos_m > 0.0 {
            let n = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            out.position += n * self.sigma_pos_m;
        }
        if self.sigma_rot_deg > 0.0 {
            let n = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            out.orientation = tip.orientation * Rotation3::new(n * self.sigma_rot_deg.to_radians()).into_inner();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoSettings {
    pub tol_kappa: f64,
    pub tol_tau: f64,
    pub max_iters: usize,
    pub gain: f64,
    pub sensor: TipSensor,
}

impl Default for ServoSettings {
    fn default() -> Self {
        ServoSettings {
            tol_kappa: 0.1,
            tol_tau: 0.1,
            max_iters: 15,
            gain: DEFAULT_CORRECTION_GAIN,
            sensor: TipSensor::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoTraceRow {
    pub iter: usize,
    pub actuation: Actuation,
    pub estimate: ArmConfig,
    pub true_config: ArmConfig,
    pub err_kappa: f64,
    pub err_tau: f64,
}

impl ServoTraceRow {
    pub fn error_norm(&self) -> f64 {
        self.err_kappa.hypot(self.err_tau)
    }

    pub fn true_error_norm(&self, goal: &ArmConfig) -> f64 {
        self.true_config.distance(goal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoResult {
    pub iterations: usize,
    pub final_estimate: ArmConfig,
    /// Configuration the plant actually settled in.
    pub final_config: ArmConfig,
    pub final_error: (f64, f64),
    pub converged: bool,
    pub saturated: bool,
    /// The initial general map had to clamp the goal.
    pub goal_clamped: bool,
    pub history: Vec<ServoTraceRow>,
}

/// Drive `plant` to `goal`: general map first, then estimate → correct →
/// apply until both strain errors are inside tolerance.
pub fn servo_to<R: Rng + ?Sized>(
    goal: ArmConfig,
    plant: &PlantModel,
    rod: &RodParams,
    settings: &ServoSettings,
    rng: &mut R,
) -> Result<ServoResult, ServoError> {
    let start = general_map(goal, plant);
    let mut act = start.actuation;
    let mut history = Vec::new();
    let mut saturated = start.clamped;
    let mut prev_est = goal;
    let mut converged = false;
    let max_iters = settings.max_iters.max(1);
    for iter in 1..=max_iters {
        let true_config = plant_apply(&act, plant);
        let tip = tip_pose(true_config, rod)?;
        let measured = settings.sensor.measure(&tip, rng);
        let est = estimate_config_robust(&measured, rod, prev_est).config;
        prev_est = est;
        let (ek, et) = (goal.kappa - est.kappa, goal.tau - est.tau);
        history.push(ServoTraceRow { iter, actuation: act, estimate: est, true_config, err_kappa: ek, err_tau: et });
        if ek.abs() < settings.tol_kappa && et.abs() < settings.tol_tau {
            converged = true;
            saturated = false;
            break;
        }
        if iter == max_iters {
            break;
        }
        let corr = correction_step(goal, est, &act, plant, settings.gain);
        saturated = corr.saturated;
        act = act.add(&corr.delta).clamped(plant.p_max);
    }
    let last = history.last().expect("at least one iteration");
    Ok(ServoResult {
        iterations: history.len(),
        final_estimate: last.estimate,
        final_config: last.true_config,
        final_error: (last.err_kappa, last.err_tau),
        converged,
        saturated: saturated && !converged,
        goal_clamped: start.clamped,
        history,
    })
}

/// Servo trace as `iter,b,r1,r2,kappa_est,tau_est,err_kappa,err_tau`.
pub fn write_servo_csv<W: Write>(out: W, result: &ServoResult) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "b", "r1", "r2", "kappa_est", "tau_est", "err_kappa", "err_tau"])?;
    for r in &result.history {
        w.write_record([
            r.iter.to_string(),
            format!("{:.6}", r.actuation.b),
            format!("{:.6}", r.actuation.r1),
            format!("{:.6}", r.actuation.r2),
            format!("{:.6}", r.estimate.kappa),
            format!("{:.6}", r.estimate.tau),
            format!("{:.6}", r.err_kappa),
            format!("{:.6}", r.err_tau),
        ])?;
    }
    w.flush()
}
