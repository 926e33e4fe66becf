//! Return estimators and the rule that picks between the vision and blind policies.
//!
//! Each policy gets a small regressor that maps the proprioceptive history to the
//! return that policy is expected to collect over the next `T` steps. At deployment
//! both regressors are queried every step; the composite runs the vision policy
//! only while its (smoothed) estimate beats the blind one and the blind one has not
//! dropped below its recent average by more than `alpha`.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{fit_mse, Adam, Mlp};
use crate::Error;

/// Which regression target the return estimator is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Lambda-weighted sum of `G = A + V` over the switch period.
    #[default]
    TdLambda,
    /// Discounted sum of raw rewards over the switch period.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Threshold,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Blind = 0,
    Vision = 1,
}

impl Phase {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposerConfig {
    /// Switch period: minimum number of steps between executed switches, and the
    /// window length of the estimator targets.
    #[serde(rename = "T")]
    pub switch_period: u32,
    pub lambda_ret: f64,
    /// Divide lambda-return targets by `1 - lambda^(T+1)`.
    pub normalized_targets: bool,
    pub alpha_threshold: f64,
    /// When false the `G_b > G_th` clause is dropped from the switching rule.
    pub use_threshold: bool,
    pub smoothing_window: usize,
    /// Speed above which no switch is executed, in m/s.
    pub v_lock: f64,
    pub selector: Selector,
    pub softmax_temperature: f64,
    pub target: TargetKind,
    /// Discount for Monte Carlo targets.
    pub mc_gamma: f64,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        ComposerConfig {
            switch_period: 50,
            lambda_ret: 0.95,
            normalized_targets: false,
            alpha_threshold: 0.5,
            use_threshold: true,
            smoothing_window: 5,
            v_lock: 1.5,
            selector: Selector::Threshold,
            softmax_temperature: 1.0,
            target: TargetKind::TdLambda,
            mc_gamma: 0.99,
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            epochs: 2,
            minibatch_size: 512,
        }
    }
}

impl ComposerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.switch_period < 1 {
            return Err("composer.T must be ≥ 1".into());
        }
        if !(self.lambda_ret >= 0.0 && self.lambda_ret < 1.0) {
            return Err("composer.lambda_ret must lie in [0, 1)".into());
        }
        if !(self.alpha_threshold >= 0.0) {
            return Err("composer.alpha_threshold must be ≥ 0".into());
        }
        if self.smoothing_window < 1 {
            return Err("composer.smoothing_window must be ≥ 1".into());
        }
        if !(self.softmax_temperature > 0.0) {
            return Err("composer.softmax_temperature must be > 0".into());
        }
        if !(self.mc_gamma > 0.0 && self.mc_gamma <= 1.0) {
            return Err("composer.mc_gamma must lie in (0, 1]".into());
        }
        if self.minibatch_size == 0 || self.epochs == 0 {
            return Err("composer.minibatch_size and composer.epochs must be ≥ 1".into());
        }
        Ok(())
    }
}

/// `(1 - lambda) * sum_{k=0..T} lambda^k G[t+k]` for every anchor `t`; windows that
/// run past the end of `g` are cut at the end (the episode ended there).
pub fn lambda_return_targets(g: &[f64], period: usize, lambda: f64, normalized: bool) -> Result<Vec<f64>, Error> {
    if g.is_empty() {
        return Err(Error::InvalidInput("lambda_return_targets: empty return sequence".into()));
    }
    let scale = if normalized { (1.0 - lambda) / (1.0 - lambda.powi(period as i32 + 1)) } else { 1.0 - lambda };
    Ok((0..g.len())
        .map(|t| {
            let last = (t + period).min(g.len() - 1);
            let mut acc = 0.0;
            for k in (t..=last).rev() {
                acc = acc * lambda + g[k];
            }
            scale * acc
        })
        .collect())
}

/// `sum_{k=0..T} gamma^k r[t+k]` for every anchor, cut at the end of `rewards`.
pub fn mc_return_targets(rewards: &[f64], gamma: f64, period: usize) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            let last = (t + period).min(rewards.len().saturating_sub(1));
            let mut acc = 0.0;
            for k in (t..=last).rev() {
                acc = acc * gamma + rewards[k];
            }
            acc
        })
        .collect()
}

/// Mean of the blind-estimate window minus `alpha`.
pub fn compute_threshold(window: &[f64], alpha: f64) -> f64 {
    assert!(!window.is_empty(), "threshold window is empty");
    window.iter().sum::<f64>() / window.len() as f64 - alpha
}

/// Phase the switching rule asks for, before dwell and lockout suppression.
pub fn desired_phase(g_v_smoothed: f64, g_b: f64, g_th: f64, use_threshold: bool) -> Phase {
    if g_v_smoothed > g_b && (!use_threshold || g_b > g_th) {
        Phase::Vision
    } else {
        Phase::Blind
    }
}

/// Keep the incumbent unless the dwell has expired and the runner is slow enough.
pub fn suppress(incumbent: Phase, desired: Phase, dwell_expired: bool, locked: bool) -> Phase {
    if desired != incumbent && dwell_expired && !locked {
        desired
    } else {
        incumbent
    }
}

/// Selection probabilities `exp(q_i / temp) / sum_j exp(q_j / temp)`.
pub fn softmax_probabilities(q: &[f64], temperature: f64) -> Vec<f64> {
    let temp = temperature.max(1e-6);
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| ((v - max) / temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn softmax_select<R: Rng + ?Sized>(q: &[f64], temperature: f64, rng: &mut R) -> usize {
    let p = softmax_probabilities(q, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// What the composer decided on one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub phase: Phase,
    pub switched: bool,
    pub g_v: f64,
    pub g_v_smoothed: f64,
    pub g_b: f64,
    pub g_th: f64,
}

/// Rolling state of the switching rule. Starts in the vision phase with the dwell
/// counter full, so the first step may already switch.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposerState {
    window_v: VecDeque<f64>,
    window_b: VecDeque<f64>,
    phase: Phase,
    dwell: u32,
    last_threshold: f64,
}

impl ComposerState {
    pub fn new(config: &ComposerConfig) -> Self {
        ComposerState {
            window_v: VecDeque::with_capacity(config.smoothing_window),
            window_b: VecDeque::with_capacity(config.smoothing_window),
            phase: Phase::Vision,
            dwell: config.switch_period,
            last_threshold: f64::NAN,
        }
    }

    /// State with explicit phase and dwell, for enumerating the rule.
    pub fn with_phase(config: &ComposerConfig, phase: Phase, dwell: u32) -> Self {
        let mut s = ComposerState::new(config);
        s.phase = phase;
        s.dwell = dwell.min(config.switch_period);
        s
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn dwell(&self) -> u32 {
        self.dwell
    }

    pub fn last_threshold(&self) -> f64 {
        self.last_threshold
    }

    /// Advance one step: push the raw estimates, evaluate the rule, apply suppression.
    /// `rng` is only used by the softmax selector.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        config: &ComposerConfig,
        g_v: f64,
        g_b: f64,
        speed: f64,
        rng: &mut R,
    ) -> Decision {
        self.dwell = (self.dwell + 1).min(config.switch_period);
        push_window(&mut self.window_v, g_v, config.smoothing_window);
        push_window(&mut self.window_b, g_b, config.smoothing_window);
        let g_v_smoothed = mean(&self.window_v);
        let g_th = compute_threshold(self.window_b.make_contiguous(), config.alpha_threshold);
        self.last_threshold = g_th;

        let desired = match config.selector {
            Selector::Threshold => desired_phase(g_v_smoothed, g_b, g_th, config.use_threshold),
            Selector::Softmax => {
                if softmax_select(&[g_v_smoothed, g_b], config.softmax_temperature, rng) == 0 {
                    Phase::Vision
                } else {
                    Phase::Blind
                }
            }
        };
        let dwell_expired = self.dwell >= config.switch_period;
        let locked = speed > config.v_lock;
        let next = suppress(self.phase, desired, dwell_expired, locked);
        let switched = next != self.phase;
        if switched {
            self.phase = next;
            self.dwell = 0;
        }
        Decision { phase: self.phase, switched, g_v, g_v_smoothed, g_b, g_th }
    }
}

/// Pick the executed action for a decision.
pub fn select_action<'a>(decision: &Decision, a_v: &'a [f64], a_b: &'a [f64]) -> &'a [f64] {
    match decision.phase {
        Phase::Vision => a_v,
        Phase::Blind => a_b,
    }
}

fn push_window(w: &mut VecDeque<f64>, v: f64, cap: usize) {
    if w.len() == cap {
        w.pop_front();
    }
    w.push_back(v);
}

fn mean(w: &VecDeque<f64>) -> f64 {
    w.iter().sum::<f64>() / w.len() as f64
}

/// Scalar regressor from the flattened proprioceptive history to a near-future return.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnEstimator {
    pub net: Mlp,
    opt: Adam,
}

impl ReturnEstimator {
    pub fn new<R: Rng + ?Sized>(history_dim: usize, hidden: &[usize], lr: f64, rng: &mut R) -> Self {
        let mut sizes = vec![history_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, 1.0, rng);
        let opt = Adam::new(net.params().len(), lr);
        ReturnEstimator { net, opt }
    }

    pub fn from_net(net: Mlp, lr: f64) -> Result<Self, Error> {
        if net.output_dim() != 1 {
            return Err(Error::InvalidInput(format!(
                "return estimator must be scalar, got {} outputs",
                net.output_dim()
            )));
        }
        let opt = Adam::new(net.params().len(), lr);
        Ok(ReturnEstimator { net, opt })
    }

    /// Reject any input layout other than exactly the proprioceptive history.
    pub fn check_input(&self, history_dim: usize) -> Result<(), Error> {
        if self.net.input_dim() != history_dim {
            return Err(Error::InvalidInput(format!(
                "return estimator input is {} wide but the proprioceptive history is {}; \
                 heightmaps and privileged channels are not allowed",
                self.net.input_dim(),
                history_dim
            )));
        }
        Ok(())
    }

    pub fn predict(&self, history: &[f64]) -> f64 {
        self.net.forward(history).0[0]
    }

    pub fn predict_batch(&self, histories: &Array2<f64>) -> Vec<f64> {
        self.net.predict(histories).column(0).to_vec()
    }

    /// Squared-error regression over shuffled minibatches; returns the mean loss
    /// seen during the pass.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        inputs: &Array2<f64>,
        targets: &[f64],
        epochs: usize,
        minibatch: usize,
        rng: &mut R,
    ) -> f64 {
        let y = Array2::from_shape_vec((targets.len(), 1), targets.to_vec()).expect("column vector");
        fit_mse(&mut self.net, &mut self.opt, inputs, &y, epochs, minibatch, 1.0, rng)
    }

    /// Mean squared error without updating.
    pub fn loss(&self, inputs: &Array2<f64>, targets: &[f64]) -> f64 {
        let y = self.net.predict(inputs);
        targets.iter().enumerate().map(|(i, t)| (y[[i, 0]] - t).powi(2)).sum::<f64>() / targets.len() as f64
    }
}
