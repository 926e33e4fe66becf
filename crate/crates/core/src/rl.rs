//! PPO with GAE, an asymmetric critic, a learned velocity estimator and a
//! terrain-level curriculum.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{lambda_return_targets, mc_return_targets, ComposerConfig, ReturnEstimator, TargetKind};
use crate::config::RunConfig;
use crate::env::{Env, EnvConfig, Observation, ObservationMode, Perception, ACTION_DIM, PROPRIO_DIM, VELOCITY_DIM};
use crate::nn::{
    clip_grad_norm, fit_mse, gaussian_entropy, gaussian_log_prob, Adam, ApproximatorConfig, GaussianPolicy, Mlp,
    LOG_STD_MAX, LOG_STD_MIN,
};
use crate::noise::{NoiseKind, NoiseModel, NoiseSpec, MAX_DELAY};
use crate::terrain::{generate_profile, TerrainConfig, TerrainProfile, GOALS_PER_TRACK};
use crate::{derive_seed, Error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Vision,
    Blind,
    NoisyPerceptive,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Vision => "vision",
            PolicyKind::Blind => "blind",
            PolicyKind::NoisyPerceptive => "noisy_perceptive",
        }
    }

    pub fn observation_mode(self) -> ObservationMode {
        match self {
            PolicyKind::Blind => ObservationMode::ActorBlind,
            _ => ObservationMode::ActorVision,
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vision" => Ok(PolicyKind::Vision),
            "blind" => Ok(PolicyKind::Blind),
            "noisy" | "noisy_perceptive" => Ok(PolicyKind::NoisyPerceptive),
            other => Err(format!("unknown policy kind {other:?} (expected vision, blind or noisy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub horizon: usize,
    pub num_envs: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Stop the epoch loop once the sample KL estimate exceeds this.
    pub target_kl: Option<f64>,
    pub updates: usize,
    /// Updates during which the actor's velocity slot is held at zero.
    pub velocity_warmup_updates: usize,
    pub velocity_lr: f64,
    pub curriculum: bool,
    pub start_level: u32,
    pub promote_goals: usize,
    pub demote_goals: usize,
    /// Rollout threads; 1 keeps everything on the calling thread.
    pub workers: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch_size: 4096,
            entropy_coef: 0.0,
            value_coef: 1.0,
            horizon: 256,
            num_envs: 64,
            learning_rate: 3e-4,
            max_grad_norm: 1.0,
            target_kl: None,
            updates: 200,
            velocity_warmup_updates: 50,
            velocity_lr: 1e-3,
            curriculum: true,
            start_level: 0,
            promote_goals: 6,
            demote_goals: 2,
            workers: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("ppo.gamma must lie in (0, 1]".into());
        }
        if !(self.lambda_gae > 0.0 && self.lambda_gae <= 1.0) {
            return Err("ppo.lambda_gae must lie in (0, 1]".into());
        }
        if !(self.clip > 0.0) {
            return Err("ppo.clip must be > 0".into());
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("minibatch_size", self.minibatch_size),
            ("horizon", self.horizon),
            ("num_envs", self.num_envs),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(format!("ppo.{name} must be ≥ 1"));
            }
        }
        if self.demote_goals >= self.promote_goals || self.promote_goals > GOALS_PER_TRACK {
            return Err("ppo.demote_goals < ppo.promote_goals ≤ 8 is required".into());
        }
        Ok(())
    }
}

/// GAE over one environment's steps, computed as the equivalent lambda-return
/// recursion `G_t = r_t + gamma * ((1 - lambda) V_{t+1} + lambda G_{t+1})` so that
/// `advantages = returns - values` holds exactly and the lambda = 0 / lambda = 1
/// cases reduce bitwise to the one-step TD target and the discounted return.
/// `dones[t]` marks a step after which nothing is bootstrapped; `bootstrap` is
/// `V(s_T)` after the last step. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs must have equal length");
    let mut returns = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_return = bootstrap;
    for t in (0..n).rev() {
        let g = if dones[t] {
            rewards[t]
        } else {
            rewards[t] + gamma * ((1.0 - lambda) * next_value + lambda * next_return)
        };
        returns[t] = g;
        next_return = g;
        next_value = values[t];
    }
    let adv = returns.iter().zip(values).map(|(g, v)| g - v).collect();
    (adv, returns)
}

/// Shift to zero mean and scale to unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-12);
    }
}

/// Per-environment terrain level with promote/demote thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum {
    pub levels: Vec<u32>,
    pub tl_max: u32,
    pub promote_goals: usize,
    pub demote_goals: usize,
    pub enabled: bool,
}

impl Curriculum {
    pub fn new(envs: usize, start: u32, tl_max: u32, promote_goals: usize, demote_goals: usize, enabled: bool) -> Self {
        Curriculum { levels: vec![start.min(tl_max); envs], tl_max, promote_goals, demote_goals, enabled }
    }

    pub fn update(&mut self, env: usize, goals_completed: usize) -> u32 {
        let tl = &mut self.levels[env];
        if self.enabled {
            if goals_completed >= self.promote_goals {
                *tl = (*tl + 1).min(self.tl_max);
            } else if goals_completed <= self.demote_goals {
                *tl = tl.saturating_sub(1);
            }
        }
        *tl
    }

    pub fn mean_level(&self) -> f64 {
        self.levels.iter().map(|l| *l as f64).sum::<f64>() / self.levels.len() as f64
    }
}

/// Clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` and its derivative in `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// Gradients of the PPO policy loss `-mean(surrogate) - c_ent * entropy` with respect
/// to the mean network and the log std vector.
#[derive(Debug, Clone)]
pub struct PolicyLoss {
    pub loss: f64,
    pub net_grads: Vec<f64>,
    pub log_std_grads: Vec<f64>,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

pub fn policy_loss_and_grads(
    policy: &GaussianPolicy,
    inputs: &Array2<f64>,
    actions: &Array2<f64>,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> PolicyLoss {
    let (means, cache) = policy.net.forward_batch(inputs);
    let n = inputs.nrows();
    let nf = n as f64;
    let d = policy.log_std.len();
    let log_std = &policy.log_std;
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
    let mut grad_means = Array2::zeros((n, d));
    let mut log_std_grads = vec![0.0; d];
    let (mut surr_sum, mut kl_sum, mut clipped) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let a = actions.row(i);
        let mu = means.row(i);
        let lp = gaussian_log_prob(a.as_slice().unwrap(), mu.as_slice().unwrap(), log_std);
        let log_ratio = lp - old_log_probs[i];
        let ratio = log_ratio.exp();
        let (surr, d_surr_d_ratio) = clipped_surrogate(ratio, advantages[i], clip);
        surr_sum += surr;
        kl_sum += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        // d(-surr/n)/d logp = -(dsurr/dratio) * ratio / n
        let g_lp = -d_surr_d_ratio * ratio / nf;
        if g_lp != 0.0 {
            for j in 0..d {
                let diff = a[j] - mu[j];
                grad_means[[i, j]] = g_lp * diff * inv_var[j];
                log_std_grads[j] += g_lp * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }
    let entropy = gaussian_entropy(log_std);
    for g in &mut log_std_grads {
        *g -= entropy_coef;
    }
    let (net_grads, _) = policy.net.backward(&cache, &grad_means);
    PolicyLoss {
        loss: -surr_sum / nf - entropy_coef * entropy,
        net_grads,
        log_std_grads,
        approx_kl: kl_sum / nf,
        clip_fraction: clipped as f64 / nf,
        entropy,
    }
}

/// `coef * mean((V - target)^2)` and its gradient.
pub fn value_loss_and_grads(critic: &Mlp, inputs: &Array2<f64>, targets: &[f64], coef: f64) -> (f64, Vec<f64>) {
    let (v, cache) = critic.forward_batch(inputs);
    let n = inputs.nrows() as f64;
    let mut grad = Array2::zeros((inputs.nrows(), 1));
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let e = v[[i, 0]] - t;
        loss += e * e;
        grad[[i, 0]] = coef * 2.0 * e / n;
    }
    let (g, _) = critic.backward(&cache, &grad);
    (coef * loss / n, g)
}

/// Policy, critic, velocity estimator and return estimator trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub kind: PolicyKind,
    pub policy: GaussianPolicy,
    pub critic: Mlp,
    pub velocity: Mlp,
    pub estimator: ReturnEstimator,
    /// Whether the actor's velocity slot is fed from the estimator.
    pub use_velocity_estimate: bool,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        kind: PolicyKind,
        env: &EnvConfig,
        approx: &ApproximatorConfig,
        composer: &ComposerConfig,
        rng: &mut R,
    ) -> Self {
        let actor_in = Observation::input_dim(kind.observation_mode());
        let critic_in = Observation::input_dim(ObservationMode::Critic);
        let hist = env.history_dim();
        let policy = GaussianPolicy::new(actor_in, &approx.actor_hidden, ACTION_DIM, approx.init_log_std, rng);
        let mut critic_sizes = vec![critic_in];
        critic_sizes.extend_from_slice(&approx.critic_hidden);
        critic_sizes.push(1);
        let mut vel_sizes = vec![hist];
        vel_sizes.extend_from_slice(&approx.velocity_hidden);
        vel_sizes.push(VELOCITY_DIM);
        Agent {
            kind,
            policy,
            critic: Mlp::new(&critic_sizes, 1.0, rng),
            velocity: Mlp::new(&vel_sizes, 1.0, rng),
            estimator: ReturnEstimator::new(hist, &composer.hidden, composer.learning_rate, rng),
            use_velocity_estimate: false,
        }
    }

    pub fn velocity_estimate(&self, history: &[f64]) -> [f64; VELOCITY_DIM] {
        if !self.use_velocity_estimate {
            return [0.0; VELOCITY_DIM];
        }
        let v = self.velocity.forward(history).0;
        [v[0], v[1], v[2]]
    }

    /// Deterministic action (the Gaussian mean) for an actor observation whose
    /// velocity slot is filled from the estimator.
    pub fn act(&self, obs: &Observation) -> Vec<f64> {
        let mut o = obs.clone();
        o.velocity = self.velocity_estimate(&obs.history);
        let mut input = Vec::with_capacity(Observation::input_dim(o.mode));
        o.to_input(&mut input);
        self.policy.net.forward(&input).0
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub mean_step_reward: f64,
    pub mean_episode_reward: f64,
    pub mean_goals: f64,
    pub episodes: usize,
    pub terrain_level: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub velocity_loss: f64,
    pub return_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub agent: Agent,
    pub curve: Vec<CurveRow>,
}

struct Worker {
    env: Env,
    rng: ChaCha8Rng,
    seed: u64,
    episodes: u64,
    episode_reward: f64,
}

impl Worker {
    fn new_episode_profile(&mut self, terrain: &TerrainConfig, level: u32) -> TerrainProfile {
        let seed = derive_seed(self.seed, self.episodes);
        let mut trng = ChaCha8Rng::seed_from_u64(seed);
        generate_profile(terrain, level as i64, seed, &mut trng).expect("terrain config was validated")
    }
}

/// Per-episode noise for the noisy-perceptive baseline: a random evaluation kind at
/// a level drawn from `[0, (TL + 1) / (TL_max + 1)]`.
pub fn noise_curriculum_model<R: Rng + ?Sized>(
    kinds: &[NoiseKind],
    level: u32,
    tl_max: u32,
    episode: u64,
    rng: &mut R,
) -> NoiseModel {
    let cap = (level as f64 + 1.0) / (tl_max as f64 + 1.0);
    let kind = kinds[rng.random_range(0..kinds.len())];
    let frac = rng.random_range(0.0..=cap);
    let lvl = if kind == NoiseKind::Delay { frac * MAX_DELAY } else { frac };
    NoiseModel::for_episode(NoiseSpec { kind, level: lvl }, episode, rng)
}

/// Flat step-major storage for one rollout; sample `i` is step `i / envs`, env `i % envs`.
struct Rollout {
    envs: usize,
    actor: Vec<f64>,
    critic: Vec<f64>,
    history: Vec<f64>,
    actions: Vec<f64>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    /// Rewards with `gamma * V(s_T)` folded in at time-limit truncations.
    gae_rewards: Vec<f64>,
    dones: Vec<bool>,
    vel_targets: Vec<f64>,
}

impl Rollout {
    fn column<T: Copy>(&self, data: &[T], env: usize) -> Vec<T> {
        data.iter().skip(env).step_by(self.envs).copied().collect()
    }
}

/// Observation rows for one worker at the current step.
struct ObsRows {
    actor: Vec<f64>,
    critic: Vec<f64>,
    history: Vec<f64>,
}

fn observe_rows(worker: &mut Worker, mode: ObservationMode) -> ObsRows {
    let actor_obs = worker.env.observe(mode);
    let critic_obs = worker.env.observe(ObservationMode::Critic);
    let mut actor = Vec::with_capacity(Observation::input_dim(mode));
    actor_obs.to_input(&mut actor);
    let mut critic = Vec::with_capacity(Observation::input_dim(ObservationMode::Critic));
    critic_obs.to_input(&mut critic);
    ObsRows { actor, critic, history: actor_obs.history }
}

fn for_each_worker<F, T>(pool: Option<&rayon::ThreadPool>, workers: &mut [Worker], f: F) -> Vec<T>
where
    F: Fn(usize, &mut Worker) -> T + Sync + Send,
    T: Send,
{
    match pool {
        Some(p) => p.install(|| workers.par_iter_mut().enumerate().map(|(i, w)| f(i, w)).collect()),
        None => workers.iter_mut().enumerate().map(|(i, w)| f(i, w)).collect(),
    }
}

struct StepRecord {
    action: [f64; ACTION_DIM],
    log_prob: f64,
    reward: f64,
    done: bool,
    truncated_critic: Option<Vec<f64>>,
    vel_target: [f64; 3],
    finished: Option<(f64, usize)>,
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), cols), flat).expect("uniform rows")
}

/// Trainer state kept between updates.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    pub agent: Agent,
    actor_opt: Adam,
    critic_opt: Adam,
    velocity_opt: Adam,
    workers: Vec<Worker>,
    pub curriculum: Curriculum,
    rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
    update: usize,
    /// When false the policy, critic and velocity estimator are frozen and only the
    /// return estimator learns.
    train_policy: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(kind: PolicyKind, cfg: &'a RunConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA6E7));
        let agent = Agent::new(kind, &cfg.env, &cfg.approximator, &cfg.composer, &mut rng);
        Self::with_agent(agent, cfg, seed, true)
    }

    /// Trainer around an existing agent. With `train_policy == false` only the return
    /// estimator is updated, which is how estimator ablations are run.
    pub fn with_agent(agent: Agent, cfg: &'a RunConfig, seed: u64, train_policy: bool) -> Result<Self, Error> {
        cfg.validate()?;
        agent.estimator.check_input(cfg.env.history_dim())?;
        let ppo = &cfg.ppo;
        let pool = if ppo.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(ppo.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("ppo.workers: {e}")))?,
            )
        } else {
            None
        };
        let curriculum = Curriculum::new(
            ppo.num_envs,
            ppo.start_level,
            cfg.terrain.tl_max,
            ppo.promote_goals,
            ppo.demote_goals,
            ppo.curriculum && train_policy,
        );
        let perception = match (agent.kind, cfg.noise.training_pipeline) {
            (PolicyKind::Vision, true) => Perception::Training,
            _ => Perception::Clean,
        };
        let mut workers = Vec::with_capacity(ppo.num_envs);
        for e in 0..ppo.num_envs {
            let wseed = derive_seed(seed, 1000 + e as u64);
            let mut w = Worker {
                env: Env::new(cfg.env.clone(), TerrainProfile::flat(&cfg.terrain), perception, derive_seed(wseed, 1)),
                rng: ChaCha8Rng::seed_from_u64(derive_seed(wseed, 2)),
                seed: wseed,
                episodes: 0,
                episode_reward: 0.0,
            };
            let profile = w.new_episode_profile(&cfg.terrain, curriculum.levels[e]);
            w.env.reset(profile);
            workers.push(w);
        }
        let mut t = Trainer {
            cfg,
            actor_opt: Adam::new(agent.policy.net.params().len() + ACTION_DIM, ppo.learning_rate),
            critic_opt: Adam::new(agent.critic.params().len(), ppo.learning_rate),
            velocity_opt: Adam::new(agent.velocity.params().len(), ppo.velocity_lr),
            agent,
            workers,
            curriculum,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)),
            pool,
            update: 0,
            train_policy,
        };
        for e in 0..t.workers.len() {
            t.prepare_perception(e);
        }
        Ok(t)
    }

    fn prepare_perception(&mut self, e: usize) {
        let w = &mut self.workers[e];
        if self.agent.kind == PolicyKind::Vision && self.cfg.noise.training_pipeline {
            let clean = w.rng.random_bool(self.cfg.noise.clean_fraction);
            w.env.set_perception(if clean { Perception::Clean } else { Perception::Training });
            return;
        }
        if self.agent.kind != PolicyKind::NoisyPerceptive {
            return;
        }
        let model = noise_curriculum_model(
            &self.cfg.noise.curriculum_kinds,
            self.curriculum.levels[e],
            self.cfg.terrain.tl_max,
            w.episodes,
            &mut w.rng,
        );
        w.env.set_perception(Perception::Eval(model));
    }

    fn collect(&mut self) -> (Rollout, Vec<(f64, usize)>) {
        let ppo = &self.cfg.ppo;
        let (n, horizon) = (self.workers.len(), ppo.horizon);
        let mode = self.agent.kind.observation_mode();
        let mut ro = Rollout {
            envs: n,
            actor: Vec::new(),
            critic: Vec::new(),
            history: Vec::new(),
            actions: Vec::with_capacity(n * horizon * ACTION_DIM),
            log_probs: Vec::with_capacity(n * horizon),
            values: Vec::with_capacity(n * horizon),
            rewards: Vec::with_capacity(n * horizon),
            gae_rewards: Vec::with_capacity(n * horizon),
            dones: Vec::with_capacity(n * horizon),
            vel_targets: Vec::with_capacity(n * horizon * 3),
        };
        let mut finished = Vec::new();
        let log_std: Vec<f64> = self.agent.policy.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        for _ in 0..horizon {
            let rows = for_each_worker(self.pool.as_ref(), &mut self.workers, |_, w| observe_rows(w, mode));
            let hist = stack(&rows.iter().map(|r| r.history.clone()).collect::<Vec<_>>());
            let mut actor = stack(&rows.iter().map(|r| r.actor.clone()).collect::<Vec<_>>());
            if self.agent.use_velocity_estimate {
                let v = self.agent.velocity.predict(&hist);
                actor.slice_mut(s![.., PROPRIO_DIM..PROPRIO_DIM + VELOCITY_DIM]).assign(&v);
            }
            let critic = stack(&rows.iter().map(|r| r.critic.clone()).collect::<Vec<_>>());
            let means = self.agent.policy.net.predict(&actor);
            let values = self.agent.critic.predict(&critic);

            let records = for_each_worker(self.pool.as_ref(), &mut self.workers, |e, w| {
                let mu = means.row(e);
                let mut action = [0.0; ACTION_DIM];
                for j in 0..ACTION_DIM {
                    let eps: f64 = StandardNormal.sample(&mut w.rng);
                    action[j] = mu[j] + log_std[j].exp() * eps;
                }
                let log_prob = gaussian_log_prob(&action, mu.as_slice().unwrap(), &log_std);
                let tr = w.env.step(&action);
                w.episode_reward += tr.reward;
                let done = tr.terminated || tr.truncated;
                let truncated_critic = if tr.truncated {
                    let mut c = Vec::new();
                    w.env.observe(ObservationMode::Critic).to_input(&mut c);
                    Some(c)
                } else {
                    None
                };
                let finished = if done {
                    let goals = w.env.state().goal_index;
                    Some((std::mem::take(&mut w.episode_reward), goals))
                } else {
                    None
                };
                StepRecord {
                    action,
                    log_prob,
                    reward: tr.reward,
                    done,
                    truncated_critic,
                    vel_target: tr.info.true_velocity,
                    finished,
                }
            });

            let trunc_rows: Vec<(usize, Vec<f64>)> =
                records.iter().enumerate().filter_map(|(e, r)| r.truncated_critic.clone().map(|c| (e, c))).collect();
            let mut boot = vec![0.0; n];
            if !trunc_rows.is_empty() {
                let m = stack(&trunc_rows.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>());
                let v = self.agent.critic.predict(&m);
                for (k, (e, _)) in trunc_rows.iter().enumerate() {
                    boot[*e] = v[[k, 0]];
                }
            }

            ro.actor.extend(actor.iter());
            ro.critic.extend(critic.iter());
            ro.history.extend(hist.iter());
            for (e, r) in records.iter().enumerate() {
                ro.actions.extend_from_slice(&r.action);
                ro.log_probs.push(r.log_prob);
                ro.values.push(values[[e, 0]]);
                ro.rewards.push(r.reward);
                ro.gae_rewards.push(r.reward + ppo.gamma * boot[e]);
                ro.dones.push(r.done);
                ro.vel_targets.extend_from_slice(&r.vel_target);
                if let Some((reward, goals)) = r.finished {
                    finished.push((reward, goals));
                    self.curriculum.update(e, goals);
                    let w = &mut self.workers[e];
                    w.episodes += 1;
                    let profile = w.new_episode_profile(&self.cfg.terrain, self.curriculum.levels[e]);
                    w.env.reset(profile);
                    self.prepare_perception(e);
                }
            }
        }
        (ro, finished)
    }

    fn final_values(&mut self) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = for_each_worker(self.pool.as_ref(), &mut self.workers, |_, w| {
            let mut c = Vec::new();
            w.env.observe(ObservationMode::Critic).to_input(&mut c);
            c
        });
        self.agent.critic.predict(&stack(&rows)).column(0).to_vec()
    }

    /// Collect one rollout and apply every enabled update.
    pub fn step(&mut self) -> Result<CurveRow, Error> {
        let ppo = self.cfg.ppo.clone();
        let composer = self.cfg.composer.clone();
        if self.train_policy {
            self.agent.use_velocity_estimate = self.update >= ppo.velocity_warmup_updates;
        }
        let (ro, finished) = self.collect();
        let boot = self.final_values();
        let n = ro.envs;
        let total = ro.rewards.len();
        let horizon = total / n;

        let mut advantages = vec![0.0; total];
        let mut returns = vec![0.0; total];
        let mut est_rows: Vec<usize> = Vec::new();
        let mut est_targets: Vec<f64> = Vec::new();
        let period = composer.switch_period as usize;
        for e in 0..n {
            let r = ro.column(&ro.gae_rewards, e);
            let v = ro.column(&ro.values, e);
            let d = ro.column(&ro.dones, e);
            let (a, g) = compute_gae(&r, &v, &d, boot[e], ppo.gamma, ppo.lambda_gae);
            for t in 0..horizon {
                advantages[t * n + e] = a[t];
                returns[t * n + e] = g[t];
            }
            let raw = ro.column(&ro.rewards, e);
            let mut start = 0;
            while start < horizon {
                let mut end = start;
                while end < horizon && !d[end] {
                    end += 1;
                }
                let closed = end < horizon;
                let stop = if closed { end + 1 } else { horizon };
                let targets = match composer.target {
                    TargetKind::TdLambda => lambda_return_targets(
                        &g[start..stop],
                        period,
                        composer.lambda_ret,
                        composer.normalized_targets,
                    )?,
                    TargetKind::MonteCarlo => mc_return_targets(&raw[start..stop], composer.mc_gamma, period),
                };
                for (k, target) in targets.into_iter().enumerate() {
                    let t = start + k;
                    if closed || t + period < stop {
                        est_rows.push(t * n + e);
                        est_targets.push(target);
                    }
                }
                start = stop;
            }
        }

        let hist_dim = self.cfg.env.history_dim();
        let hist = Array2::from_shape_vec((total, hist_dim), ro.history).expect("history rows");
        let est_x = hist.select(Axis(0), &est_rows);
        let return_loss = if est_targets.is_empty() {
            f64::NAN
        } else {
            // Loss on fresh data before fitting, so the curve tracks generalization.
            let before = self.agent.estimator.loss(&est_x, &est_targets);
            self.agent.estimator.fit(&est_x, &est_targets, composer.epochs, composer.minibatch_size, &mut self.rng);
            before
        };
        if !return_loss.is_finite() && !est_targets.is_empty() {
            return Err(Error::NonFinite { update: self.update, what: "return estimator loss".into() });
        }

        let mut row = CurveRow {
            update: self.update,
            mean_step_reward: ro.rewards.iter().sum::<f64>() / total as f64,
            mean_episode_reward: mean_or_nan(finished.iter().map(|f| f.0)),
            mean_goals: mean_or_nan(finished.iter().map(|f| f.1 as f64)),
            episodes: finished.len(),
            terrain_level: self.curriculum.mean_level(),
            policy_loss: f64::NAN,
            value_loss: f64::NAN,
            velocity_loss: f64::NAN,
            return_loss,
            entropy: gaussian_entropy(&self.agent.policy.log_std),
            approx_kl: f64::NAN,
        };

        if self.train_policy {
            let actor_dim = Observation::input_dim(self.agent.kind.observation_mode());
            let critic_dim = Observation::input_dim(ObservationMode::Critic);
            let actor = Array2::from_shape_vec((total, actor_dim), ro.actor).expect("actor rows");
            let critic = Array2::from_shape_vec((total, critic_dim), ro.critic).expect("critic rows");
            let actions = Array2::from_shape_vec((total, ACTION_DIM), ro.actions).expect("action rows");
            normalize_advantages(&mut advantages);
            let batch = PpoBatch {
                actor: &actor,
                critic: &critic,
                actions: &actions,
                log_probs: &ro.log_probs,
                advantages: &advantages,
                returns: &returns,
            };
            let stats =
                ppo_update(&mut self.agent, &mut self.actor_opt, &mut self.critic_opt, &batch, &ppo, &mut self.rng)
                    .map_err(|what| Error::NonFinite { update: self.update, what })?;
            row.policy_loss = stats.policy_loss;
            row.value_loss = stats.value_loss;
            row.approx_kl = stats.approx_kl;
            row.entropy = gaussian_entropy(&self.agent.policy.log_std);

            let vel_y = Array2::from_shape_vec((total, 3), ro.vel_targets).expect("velocity rows");
            row.velocity_loss = fit_mse(
                &mut self.agent.velocity,
                &mut self.velocity_opt,
                &hist,
                &vel_y,
                ppo.epochs,
                ppo.minibatch_size,
                ppo.max_grad_norm,
                &mut self.rng,
            );
            if !row.velocity_loss.is_finite() {
                return Err(Error::NonFinite { update: self.update, what: "velocity estimator loss".into() });
            }
        }
        self.update += 1;
        Ok(row)
    }
}

fn mean_or_nan(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for v in it {
        s += v;
        c += 1;
    }
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

pub struct PpoBatch<'b> {
    pub actor: &'b Array2<f64>,
    pub critic: &'b Array2<f64>,
    pub actions: &'b Array2<f64>,
    pub log_probs: &'b [f64],
    /// Already normalized.
    pub advantages: &'b [f64],
    pub returns: &'b [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Epochs of shuffled minibatch updates on the clipped surrogate and the value loss.
/// Non-finite losses abort with a description of the offending minibatch.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    batch: &PpoBatch<'_>,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats, String> {
    let total = batch.actor.nrows();
    let mut idx: Vec<usize> = (0..total).collect();
    let (mut pl, mut vl, mut kl, mut cf, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0);
    'epochs: for epoch in 0..cfg.epochs {
        idx.shuffle(rng);
        let mut epoch_kl = 0.0;
        let mut epoch_batches = 0.0;
        for (mb, chunk) in idx.chunks(cfg.minibatch_size).enumerate() {
            let a_in = batch.actor.select(Axis(0), chunk);
            let c_in = batch.critic.select(Axis(0), chunk);
            let acts = batch.actions.select(Axis(0), chunk);
            let old: Vec<f64> = chunk.iter().map(|&i| batch.log_probs[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| batch.advantages[i]).collect();
            let ret: Vec<f64> = chunk.iter().map(|&i| batch.returns[i]).collect();

            let mut p = policy_loss_and_grads(&agent.policy, &a_in, &acts, &old, &adv, cfg.clip, cfg.entropy_coef);
            let (v_loss, mut v_grads) = value_loss_and_grads(&agent.critic, &c_in, &ret, cfg.value_coef);
            if !p.loss.is_finite() || !v_loss.is_finite() {
                return Err(format!(
                    "non-finite loss in epoch {epoch}, minibatch {mb} (policy {}, value {v_loss})",
                    p.loss
                ));
            }
            clip_grad_norm(&mut [&mut p.net_grads, &mut p.log_std_grads], cfg.max_grad_norm);
            clip_grad_norm(&mut [&mut v_grads], cfg.max_grad_norm);
            let mut actor_params: Vec<f64> = agent.policy.net.params().to_vec();
            actor_params.extend_from_slice(&agent.policy.log_std);
            let mut actor_grads = p.net_grads;
            actor_grads.extend_from_slice(&p.log_std_grads);
            actor_opt.step(&mut actor_params, &actor_grads);
            let split = agent.policy.net.params().len();
            agent.policy.net.params_mut().copy_from_slice(&actor_params[..split]);
            agent.policy.log_std.copy_from_slice(&actor_params[split..]);
            agent.policy.clamp_log_std();
            critic_opt.step(agent.critic.params_mut(), &v_grads);

            pl += p.loss;
            vl += v_loss;
            kl += p.approx_kl;
            cf += p.clip_fraction;
            count += 1.0;
            epoch_kl += p.approx_kl;
            epoch_batches += 1.0;
        }
        if let Some(target) = cfg.target_kl {
            if epoch_kl / epoch_batches > target {
                break 'epochs;
            }
        }
    }
    Ok(PpoStats { policy_loss: pl / count, value_loss: vl / count, approx_kl: kl / count, clip_fraction: cf / count })
}

/// Full training run for one policy kind.
pub fn train_policy(kind: PolicyKind, cfg: &RunConfig, seed: u64) -> Result<TrainOutput, Error> {
    train_policy_with(kind, cfg, seed, |_| {})
}

/// As [`train_policy`], calling `progress` after every update.
pub fn train_policy_with(
    kind: PolicyKind,
    cfg: &RunConfig,
    seed: u64,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainOutput, Error> {
    let mut trainer = Trainer::new(kind, cfg, seed)?;
    let mut curve = Vec::with_capacity(cfg.ppo.updates);
    let mut last_good = trainer.agent.clone();
    for _ in 0..cfg.ppo.updates {
        match trainer.step() {
            Ok(row) => {
                progress(&row);
                curve.push(row);
                last_good = trainer.agent.clone();
            }
            Err(e) => {
                return Err(Error::Diverged { source: Box::new(e), last_good: Box::new(last_good), curve });
            }
        }
    }
    Ok(TrainOutput { agent: trainer.agent, curve })
}

/// Refit the return estimator of a frozen agent from scratch with the composer
/// settings in `cfg`. Returns the new estimator's per-update loss curve.
pub fn retrain_estimator(
    agent: &Agent,
    cfg: &RunConfig,
    seed: u64,
    updates: usize,
) -> Result<(ReturnEstimator, Vec<f64>), Error> {
    let mut fresh = agent.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE571));
    fresh.estimator =
        ReturnEstimator::new(cfg.env.history_dim(), &cfg.composer.hidden, cfg.composer.learning_rate, &mut rng);
    let mut trainer = Trainer::with_agent(fresh, cfg, seed, false)?;
    let mut losses = Vec::with_capacity(updates);
    for _ in 0..updates {
        losses.push(trainer.step()?.return_loss);
    }
    Ok((trainer.agent.estimator, losses))
}
