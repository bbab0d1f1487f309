//! Batch evaluation: episode runners for the pure-simulation and deployment
//! pipelines, success/repeatability metrics, payload sweeps and report files.

use crate::envmdp::{
    is_viewable, Action, EnvError, EnvSetup, EpisodeRecord, Normalizer, SoftArmEnv, StateVector,
};
use crate::localctl::{servo_to, PlantModel, ServoError, ServoSettings};
use crate::rodkin::{tip_pose, ArmConfig, Pose};
use crate::sac::SacAgent;
use crate::vision::{distal_camera, project_point};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error("no episodes to summarise")]
    NoEpisodes,
    #[error("threshold list is empty or contains a non-positive value")]
    BadThresholds,
    #[error("metrics violate threshold monotonicity: {0:?}")]
    NotMonotone(Vec<(f64, f64)>),
    #[error("cannot write report to {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Anything that maps the current state to an action.
pub trait Policy: Send {
    /// Called once per episode with that episode's seed.
    fn begin_episode(&mut self, _seed: u64) {}
    fn act(&mut self, env: &SoftArmEnv, state: &StateVector) -> Action;
}

/// Deterministic SAC policy.
#[derive(Debug, Clone)]
pub struct SacPolicy {
    pub agent: SacAgent,
    pub normalizer: Normalizer,
}

impl Policy for SacPolicy {
    fn act(&mut self, _env: &SoftArmEnv, state: &StateVector) -> Action {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.agent.act(&self.normalizer.apply(state), true, &mut unused)
    }
}

/// Uniform random actions, reseeded every episode.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new() -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Default for RandomPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl Policy for RandomPolicy {
    fn begin_episode(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a);
    }

    fn act(&mut self, _env: &SoftArmEnv, _state: &StateVector) -> Action {
        Action::new(self.rng.gen_range(-1.0..=1.0), self.rng.gen_range(-1.0..=1.0))
    }
}

/// Scripted policy with privileged access to the target: grid-searches the
/// configuration that best centers it and steers straight there.
#[derive(Debug, Clone)]
pub struct GridOraclePolicy {
    grid: Vec<(ArmConfig, Pose)>,
}

impl GridOraclePolicy {
    pub fn new(setup: &EnvSetup, per_axis: usize) -> Result<Self, EnvError> {
        let b = setup.env.bounds;
        let n = per_axis.max(2);
        let lerp = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let mut grid = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let c = ArmConfig::new(lerp(b.kappa_min, b.kappa_max, i), lerp(-b.tau_max, b.tau_max, j))?;
                grid.push((c, tip_pose(c, &setup.rod)?));
            }
        }
        Ok(GridOraclePolicy { grid })
    }

    /// Grid configuration minimising the centering error of `target`.
    pub fn solve(&self, setup: &EnvSetup, target: &Vector3<f64>) -> Option<(ArmConfig, f64)> {
        let center = crate::envmdp::FrameGeometry::of(&setup.intrinsics).center;
        self.grid
            .iter()
            .filter_map(|(c, tip)| {
                let cam = distal_camera(tip, &setup.intrinsics);
                if cam.depth(target) <= setup.env.target_radius {
                    return None;
                }
                project_point(&cam, target).filter(|p| cam.contains(p)).map(|p| (*c, p.distance(&center)))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

impl Policy for GridOraclePolicy {
    fn act(&mut self, env: &SoftArmEnv, _state: &StateVector) -> Action {
        let setup = env.setup();
        match self.solve(setup, &env.target()) {
            Some((goal, _)) => {
                let cur = env.config();
                Action::new(
                    (goal.kappa - cur.kappa) / setup.env.action_scale_kappa,
                    (goal.tau - cur.tau) / setup.env.action_scale_tau,
                )
            }
            None => Action::new(0.0, 0.0),
        }
    }
}

/// How policy actions reach the arm.
#[derive(Debug, Clone, PartialEq)]
pub enum Pipeline {
    /// The commanded configuration is applied exactly.
    PureSim,
    /// The commanded configuration is a goal for the local controller acting
    /// on a plant; the arm ends wherever the servo loop leaves it.
    DeploySim { plant: PlantModel, servo: ServoSettings },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Region {
    pub distance_band: usize,
    pub height_band: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestPoint {
    pub target: [f64; 3],
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPointSet {
    pub points: Vec<TestPoint>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionBands {
    /// Horizontal distance from the arm axis, m. `n+1` edges make `n` bands.
    pub distance_edges: Vec<f64>,
    /// Depth below the arm base, m.
    pub height_edges: Vec<f64>,
}

impl Default for RegionBands {
    fn default() -> Self {
        RegionBands { distance_edges: vec![0.15, 0.25, 0.35, 0.48], height_edges: vec![0.15, 0.20, 0.25, 0.30, 0.35] }
    }
}

fn band(edges: &[f64], x: f64) -> usize {
    let n = edges.len().saturating_sub(1).max(1);
    edges.iter().skip(1).position(|&e| x < e).unwrap_or(n - 1).min(n - 1)
}

impl RegionBands {
    pub fn classify(&self, p: &Vector3<f64>) -> Region {
        Region { distance_band: band(&self.distance_edges, p.x.hypot(p.y)), height_band: band(&self.height_edges, p.z) }
    }
}

impl TestPointSet {
    /// Viewable targets drawn from the environment's target box.
    pub fn generate(setup: &EnvSetup, bands: &RegionBands, n_points: usize, trials: usize, seed: u64) -> Result<Self, EnvError> {
        let grid = crate::envmdp::viewability_grid(setup)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n_points)
            .map(|_| {
                let t = crate::envmdp::sample_target(&mut rng, setup, &grid);
                TestPoint { target: [t.x, t.y, t.z], region: bands.classify(&t) }
            })
            .collect();
        Ok(TestPointSet { points, trials: trials.max(2) })
    }

    pub fn episode_count(&self) -> usize {
        self.points.len() * self.trials
    }
}

/// One evaluated episode with its test-point bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub point: Option<usize>,
    pub trial: usize,
    pub region: Option<Region>,
    pub record: EpisodeRecord,
}

/// Which episodes to run.
#[derive(Debug, Clone, PartialEq)]
pub enum EpisodePlan {
    /// `env.reset(seed)` for each seed: random start and random target.
    Randomized { seeds: Vec<u64> },
    /// Fixed targets, random start per trial.
    Points { set: TestPointSet, seed: u64 },
}

impl EpisodePlan {
    pub fn randomized(first_seed: u64, episodes: usize) -> Self {
        EpisodePlan::Randomized { seeds: (0..episodes as u64).map(|k| first_seed + k).collect() }
    }

    fn len(&self) -> usize {
        match self {
            EpisodePlan::Randomized { seeds } => seeds.len(),
            EpisodePlan::Points { set, .. } => set.episode_count(),
        }
    }
}

fn run_one<P: Policy>(
    policy: &mut P,
    env: &mut SoftArmEnv,
    pipeline: &Pipeline,
    plan: &EpisodePlan,
    k: usize,
) -> Result<EvalEpisode, EvalError> {
    let (seed, point, trial) = match plan {
        EpisodePlan::Randomized { seeds } => (seeds[k], None, 0),
        EpisodePlan::Points { set, seed } => {
            let (p, t) = (k / set.trials, k % set.trials);
            (seed.wrapping_add(k as u64), Some(p), t)
        }
    };
    let mut state = match (plan, point) {
        (EpisodePlan::Points { set, .. }, Some(p)) => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
            let b = env.setup().env.bounds;
            let init = ArmConfig {
                kappa: init_rng.gen_range(b.kappa_min..=b.kappa_max),
                tau: init_rng.gen_range(-b.tau_max..=b.tau_max),
            };
            env.reset_to(seed, init, Vector3::from(set.points[p].target))?
        }
        _ => env.reset(seed)?,
    };
    let region = match (plan, point) {
        (EpisodePlan::Points { set, .. }, Some(p)) => Some(set.points[p].region),
        _ => None,
    };
    let mut record = EpisodeRecord::new(seed, env.target(), env.config());
    policy.begin_episode(seed);
    let mut servo_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    loop {
        let action = policy.act(env, &state);
        let step = match pipeline {
            Pipeline::PureSim => env.step(action)?,
            Pipeline::DeploySim { plant, servo } => {
                let goal = env.commanded_config(action);
                let result = servo_to(goal, plant, &env.setup().rod, servo, &mut servo_rng)?;
                if result.saturated {
                    record.saturated_servos += 1;
                }
                env.step_to(result.final_config)?
            }
        };
        record.push(action.clamped(), env.config(), &step);
        state = step.state;
        if step.done {
            break;
        }
    }
    Ok(EvalEpisode { point, trial, region, record })
}

/// Run every episode of `plan`. With `workers > 1` episodes are split across
/// threads; results are identical to the serial order.
pub fn run_episodes<P: Policy + Clone>(
    policy: &P,
    setup: &EnvSetup,
    pipeline: &Pipeline,
    plan: &EpisodePlan,
    workers: usize,
) -> Result<Vec<EvalEpisode>, EvalError> {
    let n = plan.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let env = SoftArmEnv::new(setup.clone())?;
    let workers = workers.clamp(1, n);
    if workers == 1 {
        let mut env = env;
        let mut policy = policy.clone();
        return (0..n).map(|k| run_one(&mut policy, &mut env, pipeline, plan, k)).collect();
    }
    let chunks: Vec<Vec<usize>> = (0..workers).map(|w| (w..n).step_by(workers).collect()).collect();
    let mut slots: Vec<Option<Result<EvalEpisode, EvalError>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|ks| {
                let mut env = env.clone();
                let mut policy = policy.clone();
                scope.spawn(move || ks.into_iter().map(|k| (k, run_one(&mut policy, &mut env, pipeline, plan, k))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("evaluation worker panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every episode assigned")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: Region,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub repeatability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    /// `(threshold_px, success_rate)`, thresholds ascending.
    pub success_rates: Vec<(f64, f64)>,
    pub reporting_threshold_px: f64,
    pub mean_steps_to_goal: Option<f64>,
    pub median_steps_to_goal: Option<f64>,
    /// Fraction of test points whose trials all share one outcome.
    pub repeatability: Option<f64>,
    pub histogram_bin_px: f64,
    pub histogram: Vec<usize>,
    /// Episodes whose target was never seen by the distal camera.
    pub never_visible: usize,
    /// Best error beyond the last histogram bin.
    pub overflow: usize,
    pub regions: Vec<RegionStats>,
}

impl Metrics {
    pub fn success_at(&self, threshold_px: f64) -> Option<f64> {
        self.success_rates.iter().find(|(t, _)| *t == threshold_px).map(|(_, r)| *r)
    }

    pub fn is_monotone(&self) -> bool {
        self.success_rates.windows(2).all(|w| w[1].1 >= w[0].1)
    }

    pub fn empty(thresholds: &[f64], reporting_threshold_px: f64, hist: &HistogramSpec) -> Metrics {
        let mut t = thresholds.to_vec();
        t.sort_by(f64::total_cmp);
        Metrics {
            episodes: 0,
            success_rates: t.into_iter().map(|t| (t, 0.0)).collect(),
            reporting_threshold_px,
            mean_steps_to_goal: None,
            median_steps_to_goal: None,
            repeatability: None,
            histogram_bin_px: hist.bin_px,
            histogram: vec![0; hist.bins()],
            never_visible: 0,
            overflow: 0,
            regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub bin_px: f64,
    pub max_px: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec { bin_px: 25.0, max_px: 500.0 }
    }
}

impl HistogramSpec {
    pub fn bins(&self) -> usize {
        (self.max_px / self.bin_px).ceil() as usize
    }
}

fn succeeded(ep: &EvalEpisode, threshold: f64) -> bool {
    ep.record.outcome.best_centering_error_px.is_some_and(|d| d <= threshold)
}

/// Summarise episodes. Success at each threshold uses the episode's best
/// visible centering error; steps-to-goal averages successful episodes only.
pub fn compute_metrics(
    episodes: &[EvalEpisode],
    thresholds: &[f64],
    reporting_threshold_px: f64,
    hist: &HistogramSpec,
) -> Result<Metrics, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::NoEpisodes);
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(EvalError::BadThresholds);
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let n = episodes.len();
    let success_rates: Vec<(f64, f64)> =
        ts.iter().map(|&t| (t, episodes.iter().filter(|e| succeeded(e, t)).count() as f64 / n as f64)).collect();

    let mut steps: Vec<usize> = episodes.iter().filter(|e| e.record.outcome.success).map(|e| e.record.outcome.steps).collect();
    steps.sort_unstable();
    let mean_steps = (!steps.is_empty()).then(|| steps.iter().sum::<usize>() as f64 / steps.len() as f64);
    let median_steps = (!steps.is_empty()).then(|| {
        let m = steps.len() / 2;
        if steps.len() % 2 == 1 {
            steps[m] as f64
        } else {
            (steps[m - 1] + steps[m]) as f64 / 2.0
        }
    });

    let mut histogram = vec![0usize; hist.bins()];
    let last_bin = histogram.len() - 1;
    let mut never_visible = 0;
    let mut overflow = 0;
    for e in episodes {
        match e.record.outcome.best_centering_error_px {
            None => never_visible += 1,
            Some(d) if d >= hist.max_px => overflow += 1,
            Some(d) => histogram[((d / hist.bin_px) as usize).min(last_bin)] += 1,
        }
    }

    let repeat = |eps: &[&EvalEpisode]| -> Option<f64> {
        let mut by_point: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
        for e in eps {
            if let Some(p) = e.point {
                by_point.entry(p).or_default().push(succeeded(e, reporting_threshold_px));
            }
        }
        let multi: Vec<_> = by_point.values().filter(|v| v.len() >= 2).collect();
        (!multi.is_empty())
            .then(|| multi.iter().filter(|v| v.iter().all(|&s| s == v[0])).count() as f64 / multi.len() as f64)
    };
    let all: Vec<&EvalEpisode> = episodes.iter().collect();
    let repeatability = repeat(&all);

    let mut by_region: BTreeMap<Region, Vec<&EvalEpisode>> = BTreeMap::new();
    for e in episodes {
        if let Some(r) = e.region {
            by_region.entry(r).or_default().push(e);
        }
    }
    let regions = by_region
        .into_iter()
        .map(|(region, eps)| {
            let successes = eps.iter().filter(|e| succeeded(e, reporting_threshold_px)).count();
            RegionStats {
                region,
                episodes: eps.len(),
                successes,
                success_rate: successes as f64 / eps.len() as f64,
                repeatability: repeat(&eps),
            }
        })
        .collect();

    let metrics = Metrics {
        episodes: n,
        success_rates,
        reporting_threshold_px,
        mean_steps_to_goal: mean_steps,
        median_steps_to_goal: median_steps,
        repeatability,
        histogram_bin_px: hist.bin_px,
        histogram,
        never_visible,
        overflow,
        regions,
    };
    if !metrics.is_monotone() {
        return Err(EvalError::NotMonotone(metrics.success_rates));
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadResult {
    pub payload_g: f64,
    pub metrics: Metrics,
    /// Failed episodes in which at least one servo call ended saturated.
    pub saturated_failures: usize,
    /// Extreme goals the local controller could not reach because of saturation.
    pub extreme_saturated: usize,
    pub extreme_goals: usize,
}

/// Deployment-pipeline evaluation of the same episodes under each payload.
#[allow(clippy::too_many_arguments)]
pub fn payload_sweep<P: Policy + Clone>(
    policy: &P,
    setup: &EnvSetup,
    base_plant: &PlantModel,
    payloads_g: &[f64],
    servo: &ServoSettings,
    plan: &EpisodePlan,
    extreme_goals: &[ArmConfig],
    thresholds: &[f64],
    reporting_threshold_px: f64,
    workers: usize,
) -> Result<Vec<PayloadResult>, EvalError> {
    payloads_g
        .iter()
        .map(|&payload_g| {
            let plant = base_plant.with_payload(payload_g);
            let pipeline = Pipeline::DeploySim { plant, servo: *servo };
            let eps = run_episodes(policy, setup, &pipeline, plan, workers)?;
            let metrics = compute_metrics(&eps, thresholds, reporting_threshold_px, &HistogramSpec::default())?;
            let saturated_failures = eps
                .iter()
                .filter(|e| !succeeded(e, reporting_threshold_px) && e.record.saturated_servos > 0)
                .count();
            let mut rng = ChaCha8Rng::seed_from_u64(payload_g.to_bits());
            let mut extreme_saturated = 0;
            for g in extreme_goals {
                let r = servo_to(*g, &plant, &setup.rod, servo, &mut rng)?;
                if r.saturated && !r.converged {
                    extreme_saturated += 1;
                }
            }
            Ok(PayloadResult { payload_g, metrics, saturated_failures, extreme_saturated, extreme_goals: extreme_goals.len() })
        })
        .collect()
}

/// Goals at the edge of the curvature range, where a payload pushes the
/// bending chamber to its pressure limit.
pub fn extreme_goals(setup: &EnvSetup, plant: &PlantModel, count: usize) -> Vec<ArmConfig> {
    let (k_reach, _) = plant.nominal_reach();
    let k = k_reach.min(setup.env.bounds.kappa_max) - 0.15;
    (0..count.max(1))
        .map(|i| {
            let t = -setup.env.bounds.tau_max * 0.5 + setup.env.bounds.tau_max * i as f64 / count.max(1) as f64;
            ArmConfig { kappa: k, tau: t }
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// File names written by [`export_report`].
pub const SCATTER_CSV: &str = "scatter.csv";
pub const HISTOGRAM_CSV: &str = "histogram.csv";
pub const REGIONS_CSV: &str = "regions.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const EPISODES_JSONL: &str = "episodes.jsonl";

/// Write scatter, histogram and regional CSVs plus a JSON summary.
pub fn export_report(metrics: &Metrics, episodes: &[EvalEpisode], out_dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let path = out_dir.join(SCATTER_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| EvalError::Io { path: path.display().to_string(), source: e.into() })?;
    let csv_err = |p: &Path| {
        let p = p.display().to_string();
        move |e: csv::Error| EvalError::Io { path: p, source: e.into() }
    };
    w.write_record(["episode", "point", "trial", "x", "y", "z", "success", "steps", "best_centering_px"]).map_err(csv_err(&path))?;
    for (i, e) in episodes.iter().enumerate() {
        let t = e.record.target;
        w.write_record([
            i.to_string(),
            e.point.map(|p| p.to_string()).unwrap_or_default(),
            e.trial.to_string(),
            format!("{:.6}", t[0]),
            format!("{:.6}", t[1]),
            format!("{:.6}", t[2]),
            u8::from(succeeded(e, metrics.reporting_threshold_px)).to_string(),
            e.record.outcome.steps.to_string(),
            fmt_opt(e.record.outcome.best_centering_error_px),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join(HISTOGRAM_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["bin_lo_px", "bin_hi_px", "count"]).map_err(csv_err(&path))?;
    if metrics.episodes > 0 {
        for (i, c) in metrics.histogram.iter().enumerate() {
            let lo = i as f64 * metrics.histogram_bin_px;
            w.write_record([format!("{lo:.1}"), format!("{:.1}", lo + metrics.histogram_bin_px), c.to_string()])
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join(REGIONS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["distance_band", "height_band", "episodes", "successes", "success_rate", "repeatability"])
        .map_err(csv_err(&path))?;
    for r in &metrics.regions {
        w.write_record([
            r.region.distance_band.to_string(),
            r.region.height_band.to_string(),
            r.episodes.to_string(),
            r.successes.to_string(),
            format!("{:.6}", r.success_rate),
            fmt_opt(r.repeatability),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join(SUMMARY_JSON);
    let json = serde_json::to_string_pretty(metrics).expect("metrics serialise");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;

    let path = out_dir.join(EPISODES_JSONL);
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    for e in episodes {
        serde_json::to_writer(&mut f, e).map_err(|e| EvalError::Io { path: path.display().to_string(), source: e.into() })?;
        f.write_all(b"\n").map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))?;
    Ok(())
}

/// Whether `target` can be centered by some configuration on the grid.
pub fn solvable(setup: &EnvSetup, grid: &[Pose], target: &Vector3<f64>) -> bool {
    is_viewable(target, grid, &setup.intrinsics, setup.env.target_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmdp::{EpisodeOutcome, EpisodeRecord};

    fn ep(point: Option<usize>, best: Option<f64>, steps: usize) -> EvalEpisode {
        let mut record = EpisodeRecord::new(0, Vector3::zeros(), ArmConfig::default());
        record.outcome = EpisodeOutcome {
            success: best.is_some_and(|d| d <= 100.0),
            steps,
            best_centering_error_px: best,
        };
        EvalEpisode { point, trial: 0, region: None, record }
    }

    const T: [f64; 3] = [100.0, 150.0, 200.0];

    #[test]
    fn all_close_succeeds_everywhere() {
        let eps: Vec<_> = (0..6).map(|_| ep(None, Some(50.0), 2)).collect();
        let m = compute_metrics(&eps, &T, 100.0, &HistogramSpec::default()).unwrap();
        assert!(m.success_rates.iter().all(|(_, r)| *r == 1.0));
        assert_eq!(m.mean_steps_to_goal, Some(2.0));
        assert_eq!(m.histogram[2], 6);
    }

    #[test]
    fn counting_thresholds() {
        let eps: Vec<_> = [90.0, 120.0, 180.0, 250.0].iter().map(|&d| ep(None, Some(d), 8)).collect();
        let m = compute_metrics(&eps, &[200.0, 100.0, 150.0], 100.0, &HistogramSpec::default()).unwrap();
        assert_eq!(m.success_rates, vec![(100.0, 0.25), (150.0, 0.5), (200.0, 0.75)]);
        assert_eq!(m.mean_steps_to_goal, Some(8.0));
    }

    #[test]
    fn repeatability_two_thirds() {
        let eps = vec![
            ep(Some(0), Some(40.0), 1),
            ep(Some(0), Some(60.0), 3),
            ep(Some(1), Some(40.0), 2),
            ep(Some(1), Some(400.0), 8),
            ep(Some(2), None, 8),
            ep(Some(2), Some(300.0), 8),
        ];
        let m = compute_metrics(&eps, &T, 100.0, &HistogramSpec::default()).unwrap();
        assert_eq!(m.repeatability, Some(2.0 / 3.0));
        assert_eq!(m.never_visible, 1);
        assert_eq!(m.median_steps_to_goal, Some(2.0));
    }

    #[test]
    fn empty_and_bad_inputs() {
        assert!(matches!(compute_metrics(&[], &T, 100.0, &HistogramSpec::default()), Err(EvalError::NoEpisodes)));
        let eps = vec![ep(None, Some(1.0), 1)];
        assert!(matches!(compute_metrics(&eps, &[], 100.0, &HistogramSpec::default()), Err(EvalError::BadThresholds)));
    }

    #[test]
    fn bands_classify_edges() {
        let b = RegionBands::default();
        assert_eq!(band(&b.distance_edges, 0.1), 0);
        assert_eq!(band(&b.distance_edges, 0.26), 1);
        assert_eq!(band(&b.distance_edges, 0.9), 2);
        assert_eq!(band(&b.height_edges, 0.34), 3);
    }

    #[test]
    fn zero_points_give_no_records() {
        let setup = EnvSetup::default();
        let plan = EpisodePlan::Points { set: TestPointSet { points: vec![], trials: 2 }, seed: 0 };
        let eps = run_episodes(&RandomPolicy::new(), &setup, &Pipeline::PureSim, &plan, 1).unwrap();
        assert!(eps.is_empty());
    }

    #[test]
    fn parallel_matches_serial() {
        let setup = EnvSetup::default();
        let plan = EpisodePlan::randomized(10, 12);
        let a = run_episodes(&RandomPolicy::new(), &setup, &Pipeline::PureSim, &plan, 1).unwrap();
        let b = run_episodes(&RandomPolicy::new(), &setup, &Pipeline::PureSim, &plan, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_with_full_range_action_succeeds_in_one_step() {
        let mut setup = EnvSetup::default();
        setup.env.action_scale_kappa = 24.0;
        setup.env.action_scale_tau = 24.0;
        let oracle = GridOraclePolicy::new(&setup, 97).unwrap();
        let set = TestPointSet::generate(&setup, &RegionBands::default(), 10, 2, 3).unwrap();
        let plan = EpisodePlan::Points { set, seed: 0 };
        let eps = run_episodes(&oracle, &setup, &Pipeline::PureSim, &plan, 1).unwrap();
        for e in &eps {
            assert!(e.record.outcome.success, "{:?}", e.record.outcome);
            assert_eq!(e.record.outcome.steps, 1);
        }
    }
}
