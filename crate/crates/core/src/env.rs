//! Planar runner on an obstacle track.
//!
//! The runner is a point mass with a square footprint of half-width
//! `body_radius`. It accelerates in the track plane while grounded and can push
//! off vertically. Solid faces taller than `step_height` above the feet block
//! motion and register contact on the body that hits them. A gap only swallows
//! the runner once its whole footprint is over it; for a few steps after walking
//! off an edge the runner can still push off the rim (a recovery step), which
//! scrapes the trailing foot.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::heightmap::{GridSpec, Heightmap};
use crate::noise::{training_noise_pipeline, DelayBuffer, NoiseModel};
use crate::terrain::{footprint_max_height, goal_direction, ObstacleKind, TerrainProfile, GOALS_PER_TRACK};

/// Length of one proprioceptive frame.
pub const PROPRIO_DIM: usize = 20;
pub const ACTION_DIM: usize = 3;
pub const VELOCITY_DIM: usize = 3;
/// Contact force above which a body counts as in illegal contact.
pub const CONTACT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    Torso,
    LeadFoot,
    TrailFoot,
    Hand,
}

impl Body {
    pub const ALL: [Body; 4] = [Body::Torso, Body::LeadFoot, Body::TrailFoot, Body::Hand];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub goal_velocity: f64,
    pub heading: f64,
    pub collision: f64,
    pub vertical_velocity: f64,
    pub action_rate: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { goal_velocity: 2.0, heading: 2.0, collision: -15.0, vertical_velocity: -1.0, action_rate: -0.3 }
    }
}

impl RewardWeights {
    /// Stable fingerprint used to check that every policy kind trains on the same reward.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("reward weights serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub goal_radius: f64,
    pub v_c: f64,
    pub episode_seconds: f64,
    pub gravity: f64,
    /// Linear drag on planar velocity while grounded (1/s).
    pub damping: f64,
    pub body_radius: f64,
    /// Faces up to this height above the feet are stepped onto rather than blocking.
    pub step_height: f64,
    /// Height above the feet where the torso begins.
    pub torso_clearance: f64,
    /// Control steps after leaving an edge during which a recovery push is possible.
    pub recovery_steps: u32,
    pub recovery_impulse_scale: f64,
    pub fall_margin: f64,
    pub history_len: usize,
    pub start_jitter: f64,
    pub odometry_noise: f64,
    pub reward: RewardWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.02,
            a_max: 4.0,
            j_max: 3.5,
            goal_radius: 0.3,
            v_c: 1.0,
            episode_seconds: 40.0,
            gravity: 9.81,
            damping: 2.0,
            body_radius: 0.15,
            step_height: 0.1,
            torso_clearance: 0.5,
            recovery_steps: 5,
            recovery_impulse_scale: 0.8,
            fall_margin: 0.05,
            history_len: 5,
            start_jitter: 0.05,
            odometry_noise: 0.05,
            reward: RewardWeights::default(),
        }
    }
}

impl EnvConfig {
    pub fn episode_steps(&self) -> u32 {
        (self.episode_seconds / self.dt).round() as u32
    }

    pub fn history_dim(&self) -> usize {
        self.history_len * PROPRIO_DIM
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("dt", self.dt),
            ("a_max", self.a_max),
            ("j_max", self.j_max),
            ("goal_radius", self.goal_radius),
            ("v_c", self.v_c),
            ("episode_seconds", self.episode_seconds),
            ("gravity", self.gravity),
            ("body_radius", self.body_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be > 0"));
            }
        }
        if self.v_c > 1.0 {
            return Err("v_c must lie in the command range [0, 1]".into());
        }
        if self.history_len == 0 {
            return Err("history_len must be >= 1".into());
        }
        Ok(())
    }
}

/// Physical action after clamping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub forward_accel: f64,
    pub lateral_accel: f64,
    pub jump_impulse: f64,
}

/// Clamp a raw policy output into the normalized action box
/// `[-1, 1] x [-1, 1] x [0, 1]`.
pub fn clamp_normalized(raw: &[f64]) -> [f64; ACTION_DIM] {
    [raw[0].clamp(-1.0, 1.0), raw[1].clamp(-1.0, 1.0), raw[2].clamp(0.0, 1.0)]
}

impl Action {
    pub fn from_normalized(u: &[f64; ACTION_DIM], config: &EnvConfig) -> Self {
        let u = clamp_normalized(u);
        Action {
            forward_accel: u[0] * config.a_max,
            lateral_accel: u[1] * config.a_max,
            jump_impulse: u[2] * config.j_max,
        }
    }

    fn clamped(self, config: &EnvConfig) -> Self {
        Action {
            forward_accel: self.forward_accel.clamp(-config.a_max, config.a_max),
            lateral_accel: self.lateral_accel.clamp(-config.a_max, config.a_max),
            jump_impulse: self.jump_impulse.clamp(0.0, config.j_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub heading: f64,
    pub grounded: bool,
    /// Per-body contact force magnitude from the last step, indexed by [`Body::index`].
    pub contact_forces: [f64; 4],
    /// Acceleration over the last step (m/s^2).
    pub acceleration: [f64; 3],
    pub step_count: u32,
    pub goal_index: usize,
    pub airborne_steps: u32,
    pub pushed_since_ground: bool,
    pub fell: bool,
}

impl AgentState {
    pub fn at(x: f64, y: f64, heading: f64) -> Self {
        AgentState {
            position: [x, y, 0.0],
            velocity: [0.0; 3],
            heading,
            grounded: true,
            contact_forces: [0.0; 4],
            acceleration: [0.0; 3],
            step_count: 0,
            goal_index: 0,
            airborne_steps: 0,
            pushed_since_ground: false,
            fell: false,
        }
    }

    pub fn planar(&self) -> [f64; 2] {
        [self.position[0], self.position[1]]
    }

    pub fn planar_speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn speed(&self) -> f64 {
        (self.velocity[0].powi(2) + self.velocity[1].powi(2) + self.velocity[2].powi(2)).sqrt()
    }

    pub fn in_contact(&self, body: Body) -> bool {
        self.contact_forces[body.index()] > CONTACT_THRESHOLD
    }

    pub fn collision_count(&self) -> usize {
        Body::ALL.iter().filter(|b| self.in_contact(**b)).count()
    }

    pub fn all_goals_reached(&self) -> bool {
        self.goal_index >= GOALS_PER_TRACK
    }
}

/// Direction commands toward the current and next waypoints.
pub fn goal_commands(state: &AgentState, profile: &TerrainProfile) -> ([f64; 2], [f64; 2]) {
    let here = state.planar();
    let n = profile.waypoints.len();
    if state.goal_index >= n {
        let h = [state.heading.cos(), state.heading.sin()];
        return (h, h);
    }
    let d1 = goal_direction(profile.waypoints[state.goal_index], here, state.heading);
    let d2 = if state.goal_index + 1 < n {
        goal_direction(profile.waypoints[state.goal_index + 1], here, state.heading)
    } else {
        d1
    };
    (d1, d2)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    /// Unweighted velocity tracking term, in [0, 1].
    pub goal_velocity: f64,
    /// Unweighted heading alignment term, in (0, 1].
    pub heading: f64,
    /// Number of bodies in illegal contact.
    pub collisions: f64,
    pub vertical_velocity_sq: f64,
    pub action_rate_sq: f64,
}

impl RewardTerms {
    /// Each term multiplied by its weight (reward rate before time scaling).
    pub fn weighted(&self, w: &RewardWeights) -> RewardTerms {
        RewardTerms {
            goal_velocity: w.goal_velocity * self.goal_velocity,
            heading: w.heading * self.heading,
            collisions: w.collision * self.collisions,
            vertical_velocity_sq: w.vertical_velocity * self.vertical_velocity_sq,
            action_rate_sq: w.action_rate * self.action_rate_sq,
        }
    }

    pub fn sum(&self) -> f64 {
        self.goal_velocity + self.heading + self.collisions + self.vertical_velocity_sq + self.action_rate_sq
    }
}

/// Per-step reward: `dt * sum(weight * term)`, plus the raw terms for logging.
pub fn compute_reward(
    state: &AgentState,
    action: &[f64; ACTION_DIM],
    prev_action: &[f64; ACTION_DIM],
    profile: &TerrainProfile,
    config: &EnvConfig,
) -> (f64, RewardTerms) {
    let (d1, _) = goal_commands(state, profile);
    let goal_yaw = d1[1].atan2(d1[0]);
    // Speed is credited only along the goal direction; crediting raw planar speed
    // makes circling in place as good as making progress.
    let toward_goal = state.velocity[0] * d1[0] + state.velocity[1] * d1[1];
    let rate: f64 = action.iter().zip(prev_action).map(|(a, b)| (a - b).powi(2)).sum();
    let terms = RewardTerms {
        goal_velocity: config.v_c.min(toward_goal.max(0.0)) / config.v_c,
        heading: ((state.heading - goal_yaw).cos() - 1.0).exp(),
        collisions: state.collision_count() as f64,
        vertical_velocity_sq: state.velocity[2].powi(2),
        action_rate_sq: rate,
    };
    (config.dt * terms.weighted(&config.reward).sum(), terms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    X,
    Y,
}

/// Move one planar axis by `delta`, stopping at the first face that is too tall
/// to step onto. Returns the new coordinate and the contacted body, if any.
fn sweep_axis(
    profile: &TerrainProfile,
    config: &EnvConfig,
    pos: [f64; 2],
    z: f64,
    delta: f64,
    axis: Axis,
) -> (f64, Option<Vec<Body>>) {
    let r = config.body_radius;
    let (along, across) = match axis {
        Axis::X => (pos[0], pos[1]),
        Axis::Y => (pos[1], pos[0]),
    };
    let target = along + delta;
    if delta == 0.0 {
        return (along, None);
    }
    let clear_above = z + config.step_height;
    let probe = |c: f64| match axis {
        Axis::X => footprint_max_height(profile, c, across, r),
        Axis::Y => footprint_max_height(profile, across, c, r),
    };
    if probe(target) <= clear_above {
        return (target, None);
    }

    // Collect faces crossed by the leading edge and keep the nearest.
    let forward = delta > 0.0;
    let lead_now = if forward { along + r } else { along - r };
    let lead_then = if forward { target + r } else { target - r };
    let mut limit: Option<(f64, f64)> = None; // (stop coordinate, face height above feet)
    let mut consider = |face: f64, top: f64| {
        let crossed = if forward {
            face >= lead_now - 1e-9 && face <= lead_then
        } else {
            face <= lead_now + 1e-9 && face >= lead_then
        };
        if !crossed {
            return;
        }
        let stop = if forward { face - r } else { face + r };
        let better = match limit {
            None => true,
            Some((s, _)) => (forward && stop < s) || (!forward && stop > s),
        };
        if better {
            limit = Some((stop, top - z));
        }
    };
    for o in &profile.obstacles {
        let (lo, hi, side_lo, side_hi) = match axis {
            Axis::X => (o.x_start, o.x_end(), o.y_min(), o.y_max()),
            Axis::Y => (o.y_min(), o.y_max(), o.x_start, o.x_end()),
        };
        if !(side_lo < across + r && side_hi > across - r) {
            continue;
        }
        match o.kind {
            ObstacleKind::Hurdle | ObstacleKind::Wall if o.height > clear_above => {
                consider(if forward { lo } else { hi }, o.height);
            }
            // Inside a gap the surrounding ground is a face at the rim.
            ObstacleKind::Gap if clear_above < 0.0 && axis == Axis::X => {
                consider(if forward { hi } else { lo }, 0.0);
            }
            _ => {}
        }
    }
    let Some((stop, face_height)) = limit else {
        return (along, Some(Vec::new()));
    };
    let stop = if forward { stop.max(along).min(target) } else { stop.min(along).max(target) };
    let tall = face_height > config.torso_clearance;
    let bodies = match (axis, forward, tall) {
        (Axis::X, true, true) => vec![Body::Torso, Body::Hand],
        (Axis::X, true, false) => vec![Body::LeadFoot],
        (Axis::X, false, true) => vec![Body::Torso],
        (Axis::X, false, false) => vec![Body::TrailFoot],
        (Axis::Y, _, true) => vec![Body::Torso],
        (Axis::Y, _, false) => vec![Body::LeadFoot],
    };
    (stop, Some(bodies))
}

/// Outcome of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: AgentState,
    pub goal_reached: bool,
    pub off_track: bool,
}

/// Advance the runner by one control period. Pure in its arguments.
pub fn step_dynamics(state: &AgentState, action: Action, profile: &TerrainProfile, config: &EnvConfig) -> StepOutcome {
    let a = action.clamped(config);
    let dt = config.dt;
    let mut s = state.clone();
    s.contact_forces = [0.0; 4];
    let v_before = s.velocity;

    if s.grounded {
        s.velocity[0] += a.forward_accel * dt;
        s.velocity[1] += a.lateral_accel * dt;
        let keep = 1.0 - config.damping * dt;
        s.velocity[0] *= keep;
        s.velocity[1] *= keep;
    }

    let can_recover = !s.grounded && !s.pushed_since_ground && s.airborne_steps <= config.recovery_steps;
    if a.jump_impulse > 0.0 && (s.grounded || can_recover) {
        if s.grounded {
            s.velocity[2] = a.jump_impulse;
        } else {
            let push = config.recovery_impulse_scale * a.jump_impulse;
            s.contact_forces[Body::TrailFoot.index()] += (push - s.velocity[2]).abs() / dt;
            s.velocity[2] = push;
        }
        s.grounded = false;
        s.pushed_since_ground = true;
    }

    let mut z = s.position[2];
    if !s.grounded {
        s.velocity[2] -= config.gravity * dt;
        z += s.velocity[2] * dt;
    }

    let (x, hit_x) = sweep_axis(profile, config, s.planar(), z, s.velocity[0] * dt, Axis::X);
    if let Some(bodies) = hit_x {
        for b in bodies {
            s.contact_forces[b.index()] += s.velocity[0].abs() / dt;
        }
        s.velocity[0] = 0.0;
    }
    s.position[0] = x;
    let (y, hit_y) = sweep_axis(profile, config, s.planar(), z, s.velocity[1] * dt, Axis::Y);
    if let Some(bodies) = hit_y {
        for b in bodies {
            s.contact_forces[b.index()] += s.velocity[1].abs() / dt;
        }
        s.velocity[1] = 0.0;
    }
    s.position[1] = y;

    let support = footprint_max_height(profile, x, y, config.body_radius);
    if z <= support {
        z = support;
        s.velocity[2] = 0.0;
        s.grounded = true;
    } else {
        s.grounded = false;
    }
    s.position[2] = z;
    if s.grounded {
        s.airborne_steps = 0;
        s.pushed_since_ground = false;
    } else {
        s.airborne_steps += 1;
    }

    if s.planar_speed() > 0.1 {
        s.heading = s.velocity[1].atan2(s.velocity[0]);
    }
    for ((acc, v), v0) in s.acceleration.iter_mut().zip(s.velocity).zip(v_before) {
        *acc = (v - v0) / dt;
    }
    s.fell = support < 0.0 && z <= support + config.fall_margin;
    let off_track = y.abs() > profile.half_width;

    let mut goal_reached = false;
    if let Some(w) = profile.waypoints.get(s.goal_index) {
        if (w[0] - x).hypot(w[1] - y) < config.goal_radius {
            s.goal_index += 1;
            goal_reached = true;
        }
    }
    s.step_count += 1;
    StepOutcome { state: s, goal_reached, off_track }
}

/// One proprioceptive frame: goal commands, heading, ground contact, body contacts,
/// previous action, IMU specific force and leg odometry.
pub fn proprio_frame<R: Rng + ?Sized>(
    state: &AgentState,
    prev_action: &[f64; ACTION_DIM],
    profile: &TerrainProfile,
    config: &EnvConfig,
    rng: &mut R,
) -> [f64; PROPRIO_DIM] {
    let (d1, d2) = goal_commands(state, profile);
    let mut f = [0.0; PROPRIO_DIM];
    f[0..2].copy_from_slice(&d1);
    f[2..4].copy_from_slice(&d2);
    f[4] = config.v_c;
    f[5] = state.heading.cos();
    f[6] = state.heading.sin();
    f[7] = if state.grounded { 1.0 } else { 0.0 };
    for b in Body::ALL {
        f[8 + b.index()] = if state.in_contact(b) { 1.0 } else { 0.0 };
    }
    f[12..15].copy_from_slice(prev_action);
    // Specific force, as an accelerometer would read it.
    let g = if state.grounded { config.gravity } else { 0.0 };
    let sf = [state.acceleration[0], state.acceleration[1], state.acceleration[2] + g];
    for i in 0..3 {
        f[15 + i] = (sf[i] / 10.0).clamp(-5.0, 5.0);
    }
    if state.grounded {
        let noise = Normal::new(0.0, config.odometry_noise.max(1e-12)).expect("finite sigma");
        f[18] = state.velocity[0] + noise.sample(rng);
        f[19] = state.velocity[1] + noise.sample(rng);
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    ActorVision,
    ActorBlind,
    Critic,
}

/// Assembled observation. Actor observations leave `velocity` zeroed; the
/// controller fills it from its velocity estimator. Critic observations carry the
/// true velocity and the larger, noise-free heightmap.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mode: ObservationMode,
    pub frame: [f64; PROPRIO_DIM],
    pub velocity: [f64; VELOCITY_DIM],
    pub heightmap: Option<Heightmap>,
    /// Last `history_len` frames, oldest first, flattened.
    pub history: Vec<f64>,
}

impl Observation {
    pub fn commands(&self) -> &[f64] {
        &self.frame[0..5]
    }

    /// Network input: frame, velocity slot, then heightmap cells if present.
    pub fn to_input(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.frame);
        out.extend_from_slice(&self.velocity);
        if let Some(h) = &self.heightmap {
            out.extend_from_slice(&h.data);
        }
    }

    pub fn input_dim(mode: ObservationMode) -> usize {
        PROPRIO_DIM
            + VELOCITY_DIM
            + match mode {
                ObservationMode::ActorVision => GridSpec::ACTOR.cells(),
                ObservationMode::ActorBlind => 0,
                ObservationMode::Critic => GridSpec::CRITIC.cells(),
            }
    }
}

/// Noise-free observation of `state`. Frames in `history` must already include the
/// current frame as their last entry.
pub fn build_observation(
    state: &AgentState,
    frame: [f64; PROPRIO_DIM],
    history: Vec<f64>,
    profile: &TerrainProfile,
    mode: ObservationMode,
) -> Observation {
    let (x, y) = (state.position[0], state.position[1]);
    let (velocity, heightmap) = match mode {
        ObservationMode::ActorVision => ([0.0; 3], Some(Heightmap::sample(profile, &GridSpec::ACTOR, x, y))),
        ObservationMode::ActorBlind => ([0.0; 3], None),
        ObservationMode::Critic => (state.velocity, Some(Heightmap::sample(profile, &GridSpec::CRITIC, x, y))),
    };
    Observation { mode, frame, velocity, heightmap, history }
}

/// How the actor heightmap is corrupted before a policy sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perception {
    Clean,
    /// Random delay plus 10% Gaussian noise.
    Training,
    Eval(NoiseModel),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub goal_index: usize,
    pub goal_reached: bool,
    pub collision_bodies: Vec<Body>,
    pub true_velocity: [f64; 3],
    pub fell: bool,
    pub completed: bool,
}

/// Result of [`Env::step`]. Observations are requested separately through
/// [`Env::observe`] so callers only pay for the views they use.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub terms: RewardTerms,
    /// Fall or leaving the track.
    pub terminated: bool,
    /// Time limit or all goals reached.
    pub truncated: bool,
    pub info: StepInfo,
}

/// A single environment instance with its own random stream.
#[derive(Debug, Clone)]
pub struct Env {
    pub config: EnvConfig,
    profile: TerrainProfile,
    state: AgentState,
    prev_action: [f64; ACTION_DIM],
    history: VecDeque<[f64; PROPRIO_DIM]>,
    delay: DelayBuffer,
    perception: Perception,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(config: EnvConfig, profile: TerrainProfile, perception: Perception, seed: u64) -> Self {
        let delay = DelayBuffer::new(config.dt);
        let mut env = Env {
            history: VecDeque::with_capacity(config.history_len),
            config,
            state: AgentState::at(0.0, 0.0, 0.0),
            profile,
            prev_action: [0.0; ACTION_DIM],
            delay,
            perception,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let profile = env.profile.clone();
        env.reset(profile);
        env
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn profile(&self) -> &TerrainProfile {
        &self.profile
    }

    pub fn prev_action(&self) -> &[f64; ACTION_DIM] {
        &self.prev_action
    }

    pub fn set_perception(&mut self, perception: Perception) {
        self.perception = perception;
    }

    pub fn perception(&self) -> Perception {
        self.perception
    }

    /// Start a new episode on `profile` with a small pose jitter.
    pub fn reset(&mut self, profile: TerrainProfile) {
        self.profile = profile;
        let j = self.config.start_jitter;
        let (dx, dy, dh) = if j > 0.0 {
            (self.rng.random_range(-j..j), self.rng.random_range(-j..j), self.rng.random_range(-2.0 * j..2.0 * j))
        } else {
            (0.0, 0.0, 0.0)
        };
        self.state = AgentState::at(dx, dy, dh);
        self.prev_action = [0.0; ACTION_DIM];
        let frame = proprio_frame(&self.state, &self.prev_action, &self.profile, &self.config, &mut self.rng);
        self.history.clear();
        for _ in 0..self.config.history_len {
            self.history.push_back(frame);
        }
        self.delay.clear();
        self.delay.push(self.clean_actor_map());
    }

    fn clean_actor_map(&self) -> Heightmap {
        Heightmap::sample(&self.profile, &GridSpec::ACTOR, self.state.position[0], self.state.position[1])
    }

    pub fn history_flat(&self) -> Vec<f64> {
        self.history.iter().flat_map(|f| f.iter().copied()).collect()
    }

    pub fn current_frame(&self) -> [f64; PROPRIO_DIM] {
        *self.history.back().expect("history is never empty")
    }

    /// Observation in `mode`; only `ActorVision` heightmaps pass through the noise model.
    pub fn observe(&mut self, mode: ObservationMode) -> Observation {
        let mut obs = build_observation(&self.state, self.current_frame(), self.history_flat(), &self.profile, mode);
        if mode == ObservationMode::ActorVision {
            let clean = obs.heightmap.take().expect("vision observation has a heightmap");
            let noisy = match self.perception {
                Perception::Clean => clean,
                Perception::Training => training_noise_pipeline(&clean, &self.delay, true, &mut self.rng),
                Perception::Eval(model) if model.is_identity() => clean,
                Perception::Eval(model) => model.apply(&clean, &self.delay, &mut self.rng),
            };
            obs.heightmap = Some(noisy);
        }
        obs
    }

    /// Apply a normalized action (clamped into `[-1,1]^2 x [0,1]`).
    pub fn step(&mut self, raw_action: &[f64]) -> Transition {
        let u = clamp_normalized(raw_action);
        let outcome =
            step_dynamics(&self.state, Action::from_normalized(&u, &self.config), &self.profile, &self.config);
        self.state = outcome.state;
        let (reward, terms) = compute_reward(&self.state, &u, &self.prev_action, &self.profile, &self.config);
        self.prev_action = u;

        let frame = proprio_frame(&self.state, &self.prev_action, &self.profile, &self.config, &mut self.rng);
        if self.history.len() == self.config.history_len {
            self.history.pop_front();
        }
        self.history.push_back(frame);
        self.delay.push(self.clean_actor_map());

        let terminated = self.state.fell || outcome.off_track;
        let completed = self.state.all_goals_reached();
        let truncated = !terminated && (completed || self.state.step_count >= self.config.episode_steps());
        Transition {
            action: u,
            reward,
            terms,
            terminated,
            truncated,
            info: StepInfo {
                goal_index: self.state.goal_index,
                goal_reached: outcome.goal_reached,
                collision_bodies: Body::ALL.iter().copied().filter(|b| self.state.in_contact(*b)).collect(),
                true_velocity: self.state.velocity,
                fell: terminated,
                completed,
            },
        }
    }
}
