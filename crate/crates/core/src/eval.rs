//! Episode execution, metrics, evaluation suites, ablations and switching traces.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{ComposerConfig, ComposerState, Phase, TargetKind};
use crate::config::{Method, RunConfig};
use crate::env::{AgentState, Env, EnvConfig, Observation, ObservationMode, Perception, ACTION_DIM};
use crate::noise::{NoiseKind, NoiseModel, NoiseSpec};
use crate::rl::{retrain_estimator, Agent};
use crate::terrain::{generate_profile, TerrainProfile, GOALS_PER_TRACK};
use crate::{derive_seed, Error};

/// Distance before an obstacle's near edge at which its approach zone starts.
pub const APPROACH_ZONE: f64 = 2.0;

/// Anything that maps the current environment state to an action.
pub trait Controller {
    fn reset(&mut self) {}
    /// Returns the executed action and, for composites, the switching decision.
    fn act(&mut self, env: &mut Env) -> ([f64; ACTION_DIM], Option<crate::composer::Decision>);
}

/// One trained policy acting deterministically.
pub struct SinglePolicy<'a> {
    pub agent: &'a Agent,
}

impl Controller for SinglePolicy<'_> {
    fn act(&mut self, env: &mut Env) -> ([f64; ACTION_DIM], Option<crate::composer::Decision>) {
        let obs = env.observe(self.agent.kind.observation_mode());
        (to_action(&self.agent.act(&obs)), None)
    }
}

/// Vision and blind policies composed by their return estimators.
pub struct Composite<'a> {
    pub vision: &'a Agent,
    pub blind: &'a Agent,
    pub config: ComposerConfig,
    state: ComposerState,
    rng: ChaCha8Rng,
}

impl<'a> Composite<'a> {
    pub fn new(vision: &'a Agent, blind: &'a Agent, config: ComposerConfig, seed: u64) -> Self {
        let state = ComposerState::new(&config);
        Composite { vision, blind, config, state, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Controller for Composite<'_> {
    fn reset(&mut self) {
        self.state = ComposerState::new(&self.config);
    }

    fn act(&mut self, env: &mut Env) -> ([f64; ACTION_DIM], Option<crate::composer::Decision>) {
        let vision_obs = env.observe(ObservationMode::ActorVision);
        let blind_obs = env.observe(ObservationMode::ActorBlind);
        let history = &blind_obs.history;
        let g_v = self.vision.estimator.predict(history);
        let g_b = self.blind.estimator.predict(history);
        let v = self.blind.velocity.forward(history).0;
        let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let decision = self.state.step(&self.config, g_v, g_b, speed, &mut self.rng);
        // Both candidates are computed every step; one is executed.
        let a_v = self.vision.act(&vision_obs);
        let a_b = self.blind.act(&blind_obs);
        let chosen = crate::composer::select_action(&decision, &a_v, &a_b);
        (to_action(chosen), Some(decision))
    }
}

/// Closure-backed controller for tests and scripted baselines.
pub struct Scripted<F: FnMut(&AgentState, &Observation) -> [f64; ACTION_DIM]> {
    pub f: F,
}

impl<F: FnMut(&AgentState, &Observation) -> [f64; ACTION_DIM]> Controller for Scripted<F> {
    fn act(&mut self, env: &mut Env) -> ([f64; ACTION_DIM], Option<crate::composer::Decision>) {
        let obs = env.observe(ObservationMode::ActorBlind);
        ((self.f)(env.state(), &obs), None)
    }
}

fn to_action(v: &[f64]) -> [f64; ACTION_DIM] {
    [v[0], v[1], v[2]]
}

/// One recorded control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub a_forward: f64,
    pub a_lateral: f64,
    pub a_jump: f64,
    pub reward: f64,
    pub r_goal_velocity: f64,
    pub r_heading: f64,
    pub r_collision: f64,
    pub r_vertical_velocity: f64,
    pub r_action_rate: f64,
    /// Goal index after the step.
    pub goal_index: usize,
    /// Number of bodies in illegal contact.
    pub collisions: usize,
    pub terminated: bool,
    pub truncated: bool,
    /// Executed phase for composites: 1 vision, 0 blind.
    pub phase: Option<u8>,
    pub g_v: Option<f64>,
    pub g_v_smoothed: Option<f64>,
    pub g_b: Option<f64>,
    pub g_th: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub profile: TerrainProfile,
    pub steps: Vec<TrajStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub goals_completed_pct: f64,
    pub episode_reward: f64,
    pub average_velocity: f64,
    /// 1 when the episode ended in a fall, else 0.
    pub fail: f64,
    pub collision_steps_pct: f64,
    /// Mean steps from entering an obstacle's approach zone to capturing its
    /// waypoint, over completed goals; NaN when no goal was completed.
    pub reach_steps: f64,
}

/// All six metrics from the trajectory and its terrain.
pub fn episode_metrics(traj: &Trajectory) -> EpisodeMetrics {
    let steps = &traj.steps;
    let n = steps.len().max(1) as f64;
    let goals = steps.last().map_or(0, |s| s.goal_index);
    let reward = steps.iter().map(|s| s.reward).sum();
    let speed = steps.iter().map(|s| s.vx.hypot(s.vy)).sum::<f64>() / n;
    let fail = if steps.last().is_some_and(|s| s.terminated) { 1.0 } else { 0.0 };
    let coll = steps.iter().filter(|s| s.collisions > 0).count() as f64;
    let reach = reach_steps(traj);
    let reach_mean = if reach.is_empty() { f64::NAN } else { reach.iter().sum::<usize>() as f64 / reach.len() as f64 };
    EpisodeMetrics {
        goals_completed_pct: 100.0 * goals as f64 / GOALS_PER_TRACK as f64,
        episode_reward: reward,
        average_velocity: speed,
        fail,
        collision_steps_pct: 100.0 * coll / n,
        reach_steps: reach_mean,
    }
}

/// Reach steps for each completed goal. A goal's clock starts on the first step
/// that begins with it as the current goal and the runner at or past
/// `x_start - APPROACH_ZONE`, and stops on the step that captures it.
pub fn reach_steps(traj: &Trajectory) -> Vec<usize> {
    let mut out = Vec::new();
    let mut entered: Option<usize> = None;
    let mut prev_goal = 0usize;
    let mut prev_x = traj.steps.first().map_or(0.0, |s| s.x);
    for s in &traj.steps {
        if let Some(o) = traj.profile.obstacles.get(prev_goal) {
            let zone = o.x_start - APPROACH_ZONE;
            // Position at the start of this step is the previous step's end.
            if entered.is_none() && (prev_x >= zone || s.x >= zone) {
                entered = Some(s.t);
            }
        }
        if s.goal_index > prev_goal {
            let start = entered.unwrap_or(s.t);
            out.push(s.t + 1 - start);
            entered = None;
            prev_goal = s.goal_index;
        }
        prev_x = s.x;
    }
    out
}

/// Run one episode to completion, fall, or time cap.
pub fn run_episode(
    controller: &mut dyn Controller,
    env_config: &EnvConfig,
    profile: &TerrainProfile,
    noise: NoiseSpec,
    episode_index: u64,
    seed: u64,
) -> (Trajectory, EpisodeMetrics) {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x401));
    let model = NoiseModel::for_episode(noise, episode_index, &mut noise_rng);
    let perception = if model.is_identity() { Perception::Clean } else { Perception::Eval(model) };
    let mut env = Env::new(env_config.clone(), profile.clone(), perception, seed);
    controller.reset();
    let mut steps = Vec::new();
    loop {
        let (action, decision) = controller.act(&mut env);
        let tr = env.step(&action);
        let s = env.state();
        let w = tr.terms.weighted(&env.config.reward);
        steps.push(TrajStep {
            t: steps.len(),
            x: s.position[0],
            y: s.position[1],
            z: s.position[2],
            vx: s.velocity[0],
            vy: s.velocity[1],
            vz: s.velocity[2],
            a_forward: tr.action[0],
            a_lateral: tr.action[1],
            a_jump: tr.action[2],
            reward: tr.reward,
            r_goal_velocity: w.goal_velocity,
            r_heading: w.heading,
            r_collision: w.collisions,
            r_vertical_velocity: w.vertical_velocity_sq,
            r_action_rate: w.action_rate_sq,
            goal_index: tr.info.goal_index,
            collisions: tr.info.collision_bodies.len(),
            terminated: tr.terminated,
            truncated: tr.truncated,
            phase: decision.map(|d| d.phase.as_u8()),
            g_v: decision.map(|d| d.g_v),
            g_v_smoothed: decision.map(|d| d.g_v_smoothed),
            g_b: decision.map(|d| d.g_b),
            g_th: decision.map(|d| d.g_th),
        });
        if tr.terminated || tr.truncated {
            break;
        }
    }
    let traj = Trajectory { profile: profile.clone(), steps };
    let m = episode_metrics(&traj);
    (traj, m)
}

/// Mean and sample (n-1) standard deviation; std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = xs.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (m, 0.0);
    }
    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Aggregated metrics for one (method, noise) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub noise_kind: String,
    pub noise_level: f64,
    pub goals_completed_pct_mean: f64,
    pub goals_completed_pct_std: f64,
    pub episode_reward_mean: f64,
    pub episode_reward_std: f64,
    pub average_velocity_mean: f64,
    pub average_velocity_std: f64,
    pub fail_rate_mean: f64,
    pub fail_rate_std: f64,
    pub collision_steps_pct_mean: f64,
    pub collision_steps_pct_std: f64,
    pub reach_steps_mean: f64,
    pub reach_steps_std: f64,
    pub episodes: usize,
    pub repeats: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub const METRIC_COLUMNS: [&str; 19] = [
    "method",
    "noise_kind",
    "noise_level",
    "goals_completed_pct_mean",
    "goals_completed_pct_std",
    "episode_reward_mean",
    "episode_reward_std",
    "average_velocity_mean",
    "average_velocity_std",
    "fail_rate_mean",
    "fail_rate_std",
    "collision_steps_pct_mean",
    "collision_steps_pct_std",
    "reach_steps_mean",
    "reach_steps_std",
    "episodes",
    "repeats",
    "config_hash",
    "seed",
];

/// Per-repeat means of each metric, then mean and std across repeats.
pub fn aggregate(per_repeat: &[Vec<EpisodeMetrics>]) -> [(f64, f64); 6] {
    let repeat_means = |f: &dyn Fn(&EpisodeMetrics) -> f64| -> Vec<f64> {
        per_repeat
            .iter()
            .map(|eps| {
                let v: Vec<f64> = eps.iter().map(f).filter(|x| x.is_finite()).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            })
            .collect()
    };
    [
        mean_std(&repeat_means(&|m| m.goals_completed_pct)),
        mean_std(&repeat_means(&|m| m.episode_reward)),
        mean_std(&repeat_means(&|m| m.average_velocity)),
        mean_std(&repeat_means(&|m| m.fail)),
        mean_std(&repeat_means(&|m| m.collision_steps_pct)),
        mean_std(&repeat_means(&|m| m.reach_steps)),
    ]
}

/// Trained agents available to a suite.
#[derive(Debug, Clone, Default)]
pub struct Checkpoints {
    pub vision: Option<Agent>,
    pub blind: Option<Agent>,
    pub noisy_perceptive: Option<Agent>,
}

impl Checkpoints {
    fn need(&self, method: Method) -> Result<(), Error> {
        let missing = match method {
            Method::Vbcom => self.vision.is_none() || self.blind.is_none(),
            Method::Vision => self.vision.is_none(),
            Method::Blind => self.blind.is_none(),
            Method::NoisyPerceptive => self.noisy_perceptive.is_none(),
        };
        if missing {
            Err(Error::Checkpoint(format!("missing checkpoint for method {}", method.name())))
        } else {
            Ok(())
        }
    }
}

/// Episode `(repeat, episode)` always sees the same terrain and seed, whatever the
/// method or noise cell.
pub fn episode_profile(cfg: &RunConfig, repeat: usize, episode: usize) -> (TerrainProfile, u64) {
    let seed = derive_seed(derive_seed(cfg.seed, 0xE7A1 + repeat as u64), episode as u64);
    let mut terrain = cfg.terrain.clone();
    if let Some(mix) = &cfg.eval.mix {
        terrain.mix = *mix;
    }
    let level = cfg.eval.terrain_level.unwrap_or(terrain.tl_max).min(terrain.tl_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = generate_profile(&terrain, level as i64, seed, &mut rng).expect("validated terrain config");
    (profile, seed)
}

fn make_controller<'a>(
    method: Method,
    ck: &'a Checkpoints,
    composer: &ComposerConfig,
    seed: u64,
) -> Box<dyn Controller + 'a> {
    match method {
        Method::Vbcom => Box::new(Composite::new(
            ck.vision.as_ref().unwrap(),
            ck.blind.as_ref().unwrap(),
            composer.clone(),
            derive_seed(seed, 0x50F7),
        )),
        Method::Vision => Box::new(SinglePolicy { agent: ck.vision.as_ref().unwrap() }),
        Method::Blind => Box::new(SinglePolicy { agent: ck.blind.as_ref().unwrap() }),
        Method::NoisyPerceptive => Box::new(SinglePolicy { agent: ck.noisy_perceptive.as_ref().unwrap() }),
    }
}

fn pool(workers: usize) -> Result<Option<rayon::ThreadPool>, Error> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("workers: {e}")))
}

/// Metrics for every `(repeat, episode)` of one cell.
pub fn run_cell(
    cfg: &RunConfig,
    ck: &Checkpoints,
    method: Method,
    composer: &ComposerConfig,
    noise: NoiseSpec,
) -> Result<Vec<Vec<EpisodeMetrics>>, Error> {
    ck.need(method)?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.eval.repeats).flat_map(|r| (0..cfg.eval.episodes).map(move |e| (r, e))).collect();
    let run = |&(r, e): &(usize, usize)| {
        let (profile, seed) = episode_profile(cfg, r, e);
        let mut c = make_controller(method, ck, composer, seed);
        run_episode(c.as_mut(), &cfg.env, &profile, noise, e as u64, seed).1
    };
    let flat: Vec<EpisodeMetrics> = match pool(cfg.eval.workers)? {
        Some(p) => p.install(|| jobs.par_iter().map(run).collect()),
        None => jobs.iter().map(run).collect(),
    };
    Ok(flat.chunks(cfg.eval.episodes).map(|c| c.to_vec()).collect())
}

fn noise_spec(kind: NoiseKind, level: f64) -> NoiseSpec {
    let lvl = if kind == NoiseKind::Delay { level * crate::noise::MAX_DELAY } else { level };
    NoiseSpec { kind, level: lvl }
}

/// Cross product of methods and noise cells. Levels are fractions of each kind's
/// maximum, so delay level 1.0 means 0.5 s.
pub fn run_suite(cfg: &RunConfig, ck: &Checkpoints) -> Result<Vec<MetricRow>, Error> {
    for m in &cfg.eval.methods {
        ck.need(*m)?;
    }
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for kind in &cfg.eval.noise_kinds {
        for level in &cfg.eval.noise_levels {
            for method in &cfg.eval.methods {
                let cell = run_cell(cfg, ck, *method, &cfg.composer, noise_spec(*kind, *level))?;
                let agg = aggregate(&cell);
                rows.push(MetricRow {
                    method: method.name().into(),
                    noise_kind: kind.name().into(),
                    noise_level: *level,
                    goals_completed_pct_mean: agg[0].0,
                    goals_completed_pct_std: agg[0].1,
                    episode_reward_mean: agg[1].0,
                    episode_reward_std: agg[1].1,
                    average_velocity_mean: agg[2].0,
                    average_velocity_std: agg[2].1,
                    fail_rate_mean: agg[3].0,
                    fail_rate_std: agg[3].1,
                    collision_steps_pct_mean: agg[4].0,
                    collision_steps_pct_std: agg[4].1,
                    reach_steps_mean: agg[5].0,
                    reach_steps_std: agg[5].1,
                    episodes: cfg.eval.episodes,
                    repeats: cfg.eval.repeats,
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_metric_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    SwitchPeriod,
    Alpha,
    Estimator,
}

impl std::str::FromStr for AblationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "period" | "switch_period" => Ok(AblationKind::SwitchPeriod),
            "alpha" => Ok(AblationKind::Alpha),
            "estimator" => Ok(AblationKind::Estimator),
            other => Err(format!("unknown ablation {other:?} (expected period, alpha or estimator)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub goals_completed_pct_mean: f64,
    pub goals_completed_pct_std: f64,
    pub collision_steps_pct_mean: f64,
    pub collision_steps_pct_std: f64,
    pub reach_steps_mean: f64,
    pub reach_steps_std: f64,
    /// Last return-estimator loss of the vision and blind estimators, when refitted.
    pub vision_estimator_loss: Option<f64>,
    pub blind_estimator_loss: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Settings shared by all ablation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetup {
    pub noise: NoiseSpec,
    /// Updates used to refit return estimators for period and estimator rows.
    pub estimator_updates: usize,
}

impl Default for AblationSetup {
    fn default() -> Self {
        AblationSetup { noise: NoiseSpec { kind: NoiseKind::ShiftForward, level: 1.0 }, estimator_updates: 30 }
    }
}

/// One row per grid value. Period and estimator rows refit both return estimators
/// on frozen policies before evaluating the composite.
pub fn run_ablations(
    kind: AblationKind,
    cfg: &RunConfig,
    vision: &Agent,
    blind: &Agent,
    setup: &AblationSetup,
) -> Result<Vec<AblationRow>, Error> {
    let mut variants: Vec<(String, ComposerConfig, bool)> = Vec::new();
    let base = cfg.composer.clone();
    match kind {
        AblationKind::SwitchPeriod => {
            for t in [100u32, 50, 5, 1] {
                variants.push((format!("T={t}"), ComposerConfig { switch_period: t, ..base.clone() }, true));
            }
        }
        AblationKind::Alpha => {
            for a in [2.0, 0.5, 0.1] {
                variants.push((
                    format!("alpha={a}"),
                    ComposerConfig { alpha_threshold: a, use_threshold: true, ..base.clone() },
                    false,
                ));
            }
            variants.push(("no_threshold".into(), ComposerConfig { use_threshold: false, ..base.clone() }, false));
        }
        AblationKind::Estimator => {
            variants.push(("td_lambda".into(), ComposerConfig { target: TargetKind::TdLambda, ..base.clone() }, true));
            variants.push((
                "monte_carlo".into(),
                ComposerConfig { target: TargetKind::MonteCarlo, ..base.clone() },
                true,
            ));
        }
    }
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for (i, (label, composer, refit)) in variants.into_iter().enumerate() {
        let (mut v, mut b) = (vision.clone(), blind.clone());
        let (mut lv, mut lb) = (None, None);
        if refit {
            let mut c = cfg.clone();
            c.composer = composer.clone();
            let (ev, curve_v) =
                retrain_estimator(vision, &c, derive_seed(cfg.seed, 0xAB00 + i as u64), setup.estimator_updates)?;
            let (eb, curve_b) =
                retrain_estimator(blind, &c, derive_seed(cfg.seed, 0xAC00 + i as u64), setup.estimator_updates)?;
            v.estimator = ev;
            b.estimator = eb;
            lv = curve_v.last().copied();
            lb = curve_b.last().copied();
        }
        let ck = Checkpoints { vision: Some(v), blind: Some(b), noisy_perceptive: None };
        let cell = run_cell(cfg, &ck, Method::Vbcom, &composer, setup.noise)?;
        let agg = aggregate(&cell);
        rows.push(AblationRow {
            label,
            goals_completed_pct_mean: agg[0].0,
            goals_completed_pct_std: agg[0].1,
            collision_steps_pct_mean: agg[4].0,
            collision_steps_pct_std: agg[4].1,
            reach_steps_mean: agg[5].0,
            reach_steps_std: agg[5].1,
            vision_estimator_loss: lv,
            blind_estimator_loss: lb,
            config_hash: hash.clone(),
            seed: cfg.seed,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a switching trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub g_v: f64,
    pub g_v_smoothed: f64,
    pub g_b: f64,
    pub g_th: f64,
    pub phase: u8,
    pub goal_index: usize,
    pub reward: f64,
    pub collision: u8,
    pub config_hash: String,
    pub seed: u64,
}

/// Composite episode with the estimator readings and phase at every step.
#[allow(clippy::too_many_arguments)]
pub fn trace_episode(
    vision: &Agent,
    blind: &Agent,
    composer: &ComposerConfig,
    env_config: &EnvConfig,
    profile: &TerrainProfile,
    noise: NoiseSpec,
    seed: u64,
    config_hash: &str,
) -> Vec<TraceRow> {
    let mut c = Composite::new(vision, blind, composer.clone(), derive_seed(seed, 0x50F7));
    let (traj, _) = run_episode(&mut c, env_config, profile, noise, 0, seed);
    traj.steps
        .iter()
        .map(|s| TraceRow {
            t: s.t,
            g_v: s.g_v.unwrap_or(f64::NAN),
            g_v_smoothed: s.g_v_smoothed.unwrap_or(f64::NAN),
            g_b: s.g_b.unwrap_or(f64::NAN),
            g_th: s.g_th.unwrap_or(f64::NAN),
            phase: s.phase.unwrap_or(Phase::Vision.as_u8()),
            goal_index: s.goal_index,
            reward: s.reward,
            collision: (s.collisions > 0) as u8,
            config_hash: config_hash.to_string(),
            seed,
        })
        .collect()
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    for s in &traj.steps {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Steps from the first illegal contact to the first vision-to-blind switch at or
/// after it, if both happen.
pub fn switch_latency_after_contact(trace: &[TraceRow]) -> Option<usize> {
    let contact = trace.iter().position(|r| r.collision == 1)?;
    let mut prev = if contact == 0 { Phase::Vision.as_u8() } else { trace[contact - 1].phase };
    for r in &trace[contact..] {
        if prev == Phase::Vision.as_u8() && r.phase == Phase::Blind.as_u8() {
            return Some(r.t - trace[contact].t);
        }
        prev = r.phase;
    }
    None
}
