//! The visual-servoing MDP: state assembly, action application, the
//! five-term reward, termination and episode randomisation.

use crate::rodkin::{tip_pose, ArmConfig, KinematicsError, Pose, RodParams, StrainBounds};
use crate::vision::{
    distal_camera, observe_scene, project_point, with_pixel_noise, BaseCameraPlacement, CameraSpec, Detection,
    Intrinsics, PixelPoint, Scene, SceneObservation, DEFAULT_TARGET_RADIUS,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};
use thiserror::Error;

pub const STATE_DIM: usize = 16;
pub const ACTION_DIM: usize = 2;

/// Task-completion threshold on the distal-image centering error.
pub const SUCCESS_PX: f64 = 100.0;
pub const COMPLETION_BONUS: f64 = 128.0;
pub const TIME_PENALTY: f64 = -10.0;
pub const VISUAL_REWARD_SCALE: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step() called on a finished episode; call reset() first")]
    EpisodeFinished,
    #[error("step() called before reset()")]
    NotReset,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("invalid environment config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for TargetBox {
    fn default() -> Self {
        Self { min: [-0.15, -0.45, 0.15], max: [0.15, -0.15, 0.35] }
    }
}

impl TargetBox {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Strain change per unit action, 1/m.
    pub action_scale_kappa: f64,
    pub action_scale_tau: f64,
    pub max_steps: usize,
    pub bounds: StrainBounds,
    pub target_box: TargetBox,
    pub target_radius: f64,
    /// Gaussian detector noise in pixels; 0 disables it.
    pub pixel_noise_sigma: f64,
    /// Per-axis resolution of the strain grid used to keep only targets that
    /// some configuration can center.
    pub viewability_grid: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            action_scale_kappa: 3.0,
            action_scale_tau: 3.0,
            max_steps: 8,
            bounds: StrainBounds::default(),
            target_box: TargetBox::default(),
            target_radius: DEFAULT_TARGET_RADIUS,
            pixel_noise_sigma: 0.0,
            viewability_grid: 49,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.bounds.validate()?;
        if !(self.action_scale_kappa > 0.0 && self.action_scale_tau > 0.0) {
            return Err("action scales must be positive".into());
        }
        if self.max_steps == 0 {
            return Err("max_steps must be >= 1".into());
        }
        if !(self.target_radius > 0.0) {
            return Err("target_radius must be positive".into());
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return Err("pixel_noise_sigma must be >= 0".into());
        }
        if (0..3).any(|i| self.target_box.min[i] > self.target_box.max[i]) {
            return Err("target_box min exceeds max".into());
        }
        if self.viewability_grid < 2 {
            return Err("viewability_grid must be >= 2".into());
        }
        Ok(())
    }
}

/// Everything needed to build an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSetup {
    pub rod: RodParams,
    pub intrinsics: Intrinsics,
    pub base_camera: BaseCameraPlacement,
    pub env: EnvConfig,
}

/// The raw (unnormalised) RL state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub tip_position: [f64; 3],
    /// `[w, x, y, z]`, `w ≥ 0`.
    pub tip_quaternion: [f64; 4],
    pub kappa: f64,
    pub tau: f64,
    pub base_tip_px: [f64; 2],
    pub base_target_px: [f64; 2],
    pub distal_target_px: [f64; 2],
    pub target_visible: bool,
}

impl StateVector {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let p = &self.tip_position;
        let q = &self.tip_quaternion;
        [
            p[0],
            p[1],
            p[2],
            q[0],
            q[1],
            q[2],
            q[3],
            self.kappa,
            self.tau,
            self.base_tip_px[0],
            self.base_tip_px[1],
            self.base_target_px[0],
            self.base_target_px[1],
            self.distal_target_px[0],
            self.distal_target_px[1],
            if self.target_visible { 1.0 } else { 0.0 },
        ]
    }
}

/// Affine normalisation applied before the policy sees a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub length: f64,
    pub kappa_max: f64,
    pub tau_max: f64,
    pub width: f64,
    pub height: f64,
}

impl Normalizer {
    pub fn from_setup(setup: &EnvSetup) -> Self {
        Normalizer {
            length: setup.rod.length,
            kappa_max: setup.env.bounds.kappa_max.max(setup.env.bounds.kappa_min.abs()),
            tau_max: setup.env.bounds.tau_max,
            width: setup.intrinsics.width as f64,
            height: setup.intrinsics.height as f64,
        }
    }

    pub fn apply(&self, s: &StateVector) -> [f64; STATE_DIM] {
        let mut x = s.to_array();
        for v in &mut x[0..3] {
            *v /= self.length;
        }
        x[7] /= self.kappa_max;
        x[8] /= self.tau_max;
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        for k in [9, 11, 13] {
            x[k] = (x[k] - hw) / hw;
            x[k + 1] = (x[k + 1] - hh) / hh;
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dk: f64,
    pub dt: f64,
}

impl Action {
    pub fn new(dk: f64, dt: f64) -> Self {
        Action { dk, dt }
    }

    pub fn clamped(&self) -> Action {
        let c = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
        Action { dk: c(self.dk), dt: c(self.dt) }
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [self.dk, self.dt]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_d: f64,
    pub r_a: f64,
    pub r_i: f64,
    pub r_c: f64,
    pub r_p: f64,
    pub total: f64,
}

/// Distal frame geometry the visual terms are measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGeometry {
    pub center: PixelPoint,
    pub half_diagonal: f64,
}

impl FrameGeometry {
    pub fn of(intr: &Intrinsics) -> Self {
        let w = intr.width as f64;
        let h = intr.height as f64;
        FrameGeometry { center: PixelPoint { u: w / 2.0, v: h / 2.0 }, half_diagonal: w.hypot(h) / 2.0 }
    }
}

pub fn distance_reward(d: f64) -> f64 {
    (-LN_2 * (40.0 * d / PI).powi(2)).exp()
}

pub fn angle_reward(alpha: f64) -> f64 {
    (-LN_2 * (8.0 * alpha / PI).powi(2)).exp()
}

pub fn visual_reward(d_i: f64, half_diagonal: f64) -> f64 {
    VISUAL_REWARD_SCALE * (-2.0 * PI * (d_i / half_diagonal).powi(2)).exp()
}

/// Angle between the tip normal and the tip-to-target vector; 0 when they coincide.
pub fn alignment_angle(tip: &Pose, target: &Vector3<f64>) -> f64 {
    let v = target - tip.position;
    let d = v.norm();
    if d == 0.0 {
        return 0.0;
    }
    (tip.z_axis().dot(&v) / d).clamp(-1.0, 1.0).acos()
}

/// Centering error of a distal detection, if the target is visible.
pub fn centering_error(distal: &Detection, frame: &FrameGeometry) -> Option<f64> {
    distal.visible.then(|| distal.centroid.distance(&frame.center))
}

pub fn compute_reward(tip: &Pose, target: &Vector3<f64>, distal: &Detection, frame: &FrameGeometry) -> RewardBreakdown {
    let d = (target - tip.position).norm();
    let r_d = distance_reward(d);
    let r_a = angle_reward(alignment_angle(tip, target));
    let (r_i, r_c) = match centering_error(distal, frame) {
        Some(d_i) => (
            visual_reward(d_i, frame.half_diagonal),
            if d_i <= SUCCESS_PX { COMPLETION_BONUS } else { 0.0 },
        ),
        None => (0.0, 0.0),
    };
    let r_p = TIME_PENALTY;
    RewardBreakdown { r_d, r_a, r_i, r_c, r_p, total: r_d + r_a + r_i + r_c + r_p }
}

/// Strain grid used to decide whether a target can be centered at all.
pub fn viewability_grid(setup: &EnvSetup) -> Result<Vec<Pose>, KinematicsError> {
    let n = setup.env.viewability_grid;
    let b = &setup.env.bounds;
    let lerp = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut poses = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let c = ArmConfig::new(lerp(b.kappa_min, b.kappa_max, i), lerp(-b.tau_max, b.tau_max, j))?;
            poses.push(tip_pose(c, &setup.rod)?);
        }
    }
    Ok(poses)
}

pub fn is_viewable(target: &Vector3<f64>, grid: &[Pose], intr: &Intrinsics, radius: f64) -> bool {
    let frame = FrameGeometry::of(intr);
    grid.iter().any(|tip| {
        let cam = distal_camera(tip, intr);
        cam.depth(target) > radius
            && project_point(&cam, target).is_some_and(|p| p.distance(&frame.center) <= SUCCESS_PX)
    })
}

/// Rejection-sample a target inside the box that some configuration can center.
pub fn sample_target<R: Rng + ?Sized>(rng: &mut R, setup: &EnvSetup, grid: &[Pose]) -> Vector3<f64> {
    let b = &setup.env.target_box;
    loop {
        let p = Vector3::new(
            rng.gen_range(b.min[0]..=b.max[0]),
            rng.gen_range(b.min[1]..=b.max[1]),
            rng.gen_range(b.min[2]..=b.max[2]),
        );
        if grid.is_empty() || is_viewable(&p, grid, &setup.intrinsics, setup.env.target_radius) {
            return p;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub reward: RewardBreakdown,
    pub success: bool,
    pub centering_error_px: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: StateVector,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: [f64; STATE_DIM],
    pub action: [f64; ACTION_DIM],
    pub config: ArmConfig,
    pub reward: RewardBreakdown,
    pub centering_error_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub best_centering_error_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub target: [f64; 3],
    pub initial_config: ArmConfig,
    pub steps: Vec<StepRecord>,
    pub outcome: EpisodeOutcome,
    /// Servo iterations that ended on the actuation limits (deployment pipeline only).
    #[serde(default)]
    pub saturated_servos: usize,
}

impl EpisodeRecord {
    pub fn new(seed: u64, target: Vector3<f64>, initial_config: ArmConfig) -> Self {
        EpisodeRecord {
            seed,
            target: [target.x, target.y, target.z],
            initial_config,
            steps: Vec::new(),
            outcome: EpisodeOutcome { success: false, steps: 0, best_centering_error_px: None },
            saturated_servos: 0,
        }
    }

    pub fn push(&mut self, action: Action, config: ArmConfig, step: &Step) {
        self.steps.push(StepRecord {
            state: step.state.to_array(),
            action: action.to_array(),
            config,
            reward: step.info.reward,
            centering_error_px: step.info.centering_error_px,
        });
        let best = &mut self.outcome.best_centering_error_px;
        if let Some(e) = step.info.centering_error_px {
            *best = Some(best.map_or(e, |b| b.min(e)));
        }
        self.outcome.steps = step.info.steps;
        self.outcome.success |= step.info.success;
    }
}

pub fn write_episodes_jsonl<W: std::io::Write>(mut out: W, records: &[EpisodeRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Single-threaded reset/step environment.
#[derive(Debug, Clone)]
pub struct SoftArmEnv {
    setup: EnvSetup,
    base_cam: CameraSpec,
    frame: FrameGeometry,
    grid: Vec<Pose>,
    rng: ChaCha8Rng,
    config: ArmConfig,
    target: Vector3<f64>,
    steps: usize,
    active: bool,
    started: bool,
    last_obs: Option<SceneObservation>,
}

impl SoftArmEnv {
    pub fn new(setup: EnvSetup) -> Result<Self, EnvError> {
        setup.rod.validate()?;
        setup.env.validate().map_err(EnvError::Config)?;
        let grid = viewability_grid(&setup)?;
        Ok(SoftArmEnv {
            base_cam: setup.base_camera.camera(&setup.intrinsics),
            frame: FrameGeometry::of(&setup.intrinsics),
            grid,
            rng: ChaCha8Rng::seed_from_u64(0),
            config: ArmConfig::default(),
            target: Vector3::zeros(),
            steps: 0,
            active: false,
            started: false,
            last_obs: None,
            setup,
        })
    }

    pub fn setup(&self) -> &EnvSetup {
        &self.setup
    }

    pub fn base_camera(&self) -> &CameraSpec {
        &self.base_cam
    }

    pub fn frame(&self) -> &FrameGeometry {
        &self.frame
    }

    pub fn viewability(&self) -> &[Pose] {
        &self.grid
    }

    pub fn config(&self) -> ArmConfig {
        self.config
    }

    pub fn target(&self) -> Vector3<f64> {
        self.target
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn last_observation(&self) -> Option<&SceneObservation> {
        self.last_obs.as_ref()
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer::from_setup(&self.setup)
    }

    /// Random initial configuration and viewable target, fully determined by `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<StateVector, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let b = self.setup.env.bounds;
        let config = ArmConfig {
            kappa: self.rng.gen_range(b.kappa_min..=b.kappa_max),
            tau: self.rng.gen_range(-b.tau_max..=b.tau_max),
        };
        let target = sample_target(&mut self.rng, &self.setup, &self.grid);
        self.start(config, target)
    }

    /// Start an episode from an explicit configuration and target. The seed
    /// only drives detector noise.
    pub fn reset_to(&mut self, seed: u64, config: ArmConfig, target: Vector3<f64>) -> Result<StateVector, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.start(self.setup.env.bounds.clamp(config), target)
    }

    fn start(&mut self, config: ArmConfig, target: Vector3<f64>) -> Result<StateVector, EnvError> {
        self.config = config;
        self.target = target;
        self.steps = 0;
        self.active = true;
        self.started = true;
        Ok(self.observe()?.0)
    }

    fn observe(&mut self) -> Result<(StateVector, Pose, SceneObservation), EnvError> {
        let tip = tip_pose(self.config, &self.setup.rod)?;
        let scene = Scene::new(self.config, &self.setup.rod, self.target, self.setup.env.target_radius)?;
        let distal = distal_camera(&tip, &self.setup.intrinsics);
        let mut obs = observe_scene(&scene, &self.base_cam, &distal);
        let sigma = self.setup.env.pixel_noise_sigma;
        if sigma > 0.0 {
            obs.base_tip = with_pixel_noise(obs.base_tip, sigma, &mut self.rng);
            obs.base_target = with_pixel_noise(obs.base_target, sigma, &mut self.rng);
            obs.distal_target = with_pixel_noise(obs.distal_target, sigma, &mut self.rng);
        }
        let px = |d: &Detection| if d.visible { [d.centroid.u, d.centroid.v] } else { [0.0, 0.0] };
        let state = StateVector {
            tip_position: [tip.position.x, tip.position.y, tip.position.z],
            tip_quaternion: tip.quaternion_wxyz(),
            kappa: self.config.kappa,
            tau: self.config.tau,
            base_tip_px: px(&obs.base_tip),
            base_target_px: px(&obs.base_target),
            distal_target_px: px(&obs.distal_target),
            target_visible: obs.distal_target.visible,
        };
        self.last_obs = Some(obs);
        Ok((state, tip, obs))
    }

    /// Configuration the action would command, before any plant is involved.
    pub fn commanded_config(&self, action: Action) -> ArmConfig {
        let a = action.clamped();
        self.setup.env.bounds.clamp(ArmConfig {
            kappa: self.config.kappa + a.dk * self.setup.env.action_scale_kappa,
            tau: self.config.tau + a.dt * self.setup.env.action_scale_tau,
        })
    }

    pub fn step(&mut self, action: Action) -> Result<Step, EnvError> {
        let goal = self.commanded_config(action);
        self.step_to(goal)
    }

    /// Advance one step with the arm ending at `achieved`; used when a plant
    /// and local controller sit between the policy and the arm.
    pub fn step_to(&mut self, achieved: ArmConfig) -> Result<Step, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if !self.active {
            return Err(EnvError::EpisodeFinished);
        }
        self.config = ArmConfig::new(achieved.kappa, achieved.tau)?;
        self.steps += 1;
        let (state, tip, obs) = self.observe()?;
        let reward = compute_reward(&tip, &self.target, &obs.distal_target, &self.frame);
        let centering = centering_error(&obs.distal_target, &self.frame);
        let success = centering.is_some_and(|d| d <= SUCCESS_PX);
        let done = success || self.steps >= self.setup.env.max_steps;
        self.active = !done;
        Ok(Step {
            state,
            reward: reward.total,
            done,
            info: StepInfo { reward, success, centering_error_px: centering, steps: self.steps },
        })
    }
}
