//! Oracle checks runnable from a release binary. Each check compares a production
//! routine against an independent, deliberately naive reference.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::composer::{
    desired_phase, lambda_return_targets, softmax_probabilities, suppress, ComposerConfig, ComposerState, Phase,
};
use crate::heightmap::Heightmap;
use crate::nn::{mse_loss_and_grads, GaussianPolicy, Mlp};
use crate::noise::{
    apply_delay, apply_float, apply_gaussian, apply_shift, DelayBuffer, NoiseKind, NoiseModel, NoiseSpec,
    ShiftDirection, FLOAT_MAX, SIGMA_MAX,
};
use crate::rl::{compute_gae, policy_loss_and_grads, value_loss_and_grads};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, failures: Vec<String>, ok_detail: String) -> CheckResult {
    if failures.is_empty() {
        CheckResult { name, passed: true, detail: ok_detail }
    } else {
        let shown: Vec<_> = failures.iter().take(3).cloned().collect();
        CheckResult { name, passed: false, detail: format!("{} failures, e.g. {}", failures.len(), shown.join("; ")) }
    }
}

/// Direct double sum with explicit powers.
fn lambda_return_reference(g: &[f64], period: usize, lambda: f64) -> Vec<f64> {
    (0..g.len())
        .map(|t| {
            let mut s = 0.0;
            for k in 0..=period {
                if t + k < g.len() {
                    s += lambda.powi(k as i32) * g[t + k];
                }
            }
            (1.0 - lambda) * s
        })
        .collect()
}

pub fn check_lambda_return(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..cases {
        let period = rng.random_range(1..=100usize);
        let len = rng.random_range(1..=150usize);
        let lambda = rng.random_range(0.01..0.99);
        let g: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fast = match lambda_return_targets(&g, period, lambda, false) {
            Ok(v) => v,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let slow = lambda_return_reference(&g, period, lambda);
        for (t, (a, b)) in fast.iter().zip(&slow).enumerate() {
            let d = (a - b).abs();
            worst = worst.max(d);
            if d > 1e-9 {
                failures.push(format!("case {case} t={t}: {a} vs {b}"));
            }
        }
    }
    result("lambda_return", failures, format!("{cases} cases, max |diff| {worst:.2e}"))
}

/// GAE by summing discounted TD errors forward from each step.
pub fn gae_reference(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let next_v = |t: usize| if t + 1 < n { values[t + 1] } else { bootstrap };
    (0..n)
        .map(|t| {
            let mut adv = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                let live = if dones[k] { 0.0 } else { 1.0 };
                let delta = rewards[k] + gamma * next_v(k) * live - values[k];
                adv += weight * delta;
                if dones[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            adv
        })
        .collect()
}

pub fn check_gae(cases_per_cell: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let grid = [0.9, 0.95, 0.99];
    let lams = [0.0, 0.5, 1.0];
    for &gamma in &grid {
        for &lambda in &lams {
            for case in 0..cases_per_cell {
                let n = rng.random_range(1..=64usize);
                let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
                let boot = rng.random_range(-1.0..1.0);
                let (adv, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda);
                let reference = gae_reference(&r, &v, &d, boot, gamma, lambda);
                for t in 0..n {
                    let diff = (adv[t] - reference[t]).abs();
                    worst = worst.max(diff);
                    if diff > 1e-9 {
                        failures.push(format!("gamma={gamma} lambda={lambda} case {case} t={t}"));
                    }
                    if ret[t] - v[t] != adv[t] {
                        failures.push(format!("returns - values != advantages at t={t}"));
                    }
                }
                // lambda = 0: one-step TD error, exactly.
                let (adv0, _) = compute_gae(&r, &v, &d, boot, gamma, 0.0);
                for t in 0..n {
                    let nv = if t + 1 < n { v[t + 1] } else { boot };
                    let target = if d[t] { r[t] } else { r[t] + gamma * nv };
                    if adv0[t] != target - v[t] {
                        failures.push(format!("lambda=0 identity at t={t}"));
                    }
                }
                // lambda = 1: discounted return minus value. Exact against the backward
                // recursion, and within 1e-9 of the forward power sum.
                let (adv1, _) = compute_gae(&r, &v, &d, boot, gamma, 1.0);
                let mut back = vec![0.0; n];
                let mut next = boot;
                for t in (0..n).rev() {
                    back[t] = if d[t] { r[t] } else { r[t] + gamma * next };
                    next = back[t];
                }
                for t in 0..n {
                    let mut g = 0.0;
                    let mut w = 1.0;
                    let mut ended = false;
                    for k in t..n {
                        g += w * r[k];
                        if d[k] {
                            ended = true;
                            break;
                        }
                        w *= gamma;
                    }
                    if !ended {
                        g += w * boot;
                    }
                    if adv1[t] != back[t] - v[t] || (adv1[t] - (g - v[t])).abs() > 1e-9 {
                        failures.push(format!("lambda=1 identity at t={t}"));
                    }
                }
            }
        }
    }
    result("gae", failures, format!("{} sequences, max |diff| {worst:.2e}", 9 * cases_per_cell))
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Central-difference check over every parameter of `params`.
fn fd_check(params: &mut [f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64, h: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Finite-difference gradient checks for every head type.
pub fn check_gradients(configs: usize, seed: u64) -> CheckResult {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst = [0.0f64; 5];
    for cfg in 0..configs {
        let input = rng.random_range(2..7usize);
        let hidden: Vec<usize> = (0..rng.random_range(1..3usize)).map(|_| rng.random_range(2..7)).collect();
        let batch = rng.random_range(2..6usize);
        let x = random_matrix(batch, input, &mut rng);

        // Policy mean and log std through the clipped surrogate.
        let act_dim = rng.random_range(1..4usize);
        let mut policy = GaussianPolicy::new(input, &hidden, act_dim, rng.random_range(-1.0..0.0), &mut rng);
        for p in policy.net.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let actions = random_matrix(batch, act_dim, &mut rng);
        let adv: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (means, _) = policy.net.forward_batch(&x);
        // Old log-probs near the current ones keep every ratio inside the clip range.
        let old: Vec<f64> = (0..batch)
            .map(|i| {
                let a: Vec<f64> = actions.row(i).to_vec();
                let m: Vec<f64> = means.row(i).to_vec();
                crate::nn::gaussian_log_prob(&a, &m, &policy.log_std) + rng.random_range(-0.05..0.05)
            })
            .collect();
        let ent = rng.random_range(0.0..0.05);
        let pl = policy_loss_and_grads(&policy, &x, &actions, &old, &adv, 0.2, ent);
        let mut params = policy.net.params().to_vec();
        let sizes = policy.net.sizes().to_vec();
        let log_std = policy.log_std.clone();
        let w = fd_check(
            &mut params,
            &pl.net_grads,
            |p| {
                let pol =
                    GaussianPolicy { net: Mlp::from_params(&sizes, p.to_vec()).unwrap(), log_std: log_std.clone() };
                policy_loss_and_grads(&pol, &x, &actions, &old, &adv, 0.2, ent).loss
            },
            H,
        );
        worst[0] = worst[0].max(w);
        if w > TOL {
            failures.push(format!("config {cfg}: policy mean rel err {w:.2e}"));
        }
        let mut ls = policy.log_std.clone();
        let net = policy.net.clone();
        let w = fd_check(
            &mut ls,
            &pl.log_std_grads,
            |l| {
                let pol = GaussianPolicy { net: net.clone(), log_std: l.to_vec() };
                policy_loss_and_grads(&pol, &x, &actions, &old, &adv, 0.2, ent).loss
            },
            H,
        );
        worst[1] = worst[1].max(w);
        if w > TOL {
            failures.push(format!("config {cfg}: log std rel err {w:.2e}"));
        }

        // Critic value loss.
        let mut sizes = vec![input];
        sizes.extend(&hidden);
        sizes.push(1);
        let critic = Mlp::new(&sizes, 1.0, &mut rng);
        let targets: Vec<f64> = (0..batch).map(|_| rng.random_range(-2.0..2.0)).collect();
        let coef = rng.random_range(0.5..2.0);
        let (_, g) = value_loss_and_grads(&critic, &x, &targets, coef);
        let mut p = critic.params().to_vec();
        let w = fd_check(
            &mut p,
            &g,
            |q| value_loss_and_grads(&Mlp::from_params(&sizes, q.to_vec()).unwrap(), &x, &targets, coef).0,
            H,
        );
        worst[2] = worst[2].max(w);
        if w > TOL {
            failures.push(format!("config {cfg}: value rel err {w:.2e}"));
        }

        // Velocity estimator (3 outputs) and return estimator (1 output) regressions.
        for (slot, out) in [(3usize, 3usize), (4, 1)] {
            let mut sizes = vec![input];
            sizes.extend(&hidden);
            sizes.push(out);
            let net = Mlp::new(&sizes, 1.0, &mut rng);
            let y = random_matrix(batch, out, &mut rng);
            let (_, g) = mse_loss_and_grads(&net, &x, &y);
            let mut p = net.params().to_vec();
            let w = fd_check(
                &mut p,
                &g,
                |q| mse_loss_and_grads(&Mlp::from_params(&sizes, q.to_vec()).unwrap(), &x, &y).0,
                H,
            );
            worst[slot] = worst[slot].max(w);
            if w > TOL {
                let what = if slot == 3 { "velocity" } else { "return" };
                failures.push(format!("config {cfg}: {what} estimator rel err {w:.2e}"));
            }
        }
    }
    result(
        "gradients",
        failures,
        format!(
            "{configs} configs, worst rel err: mean {:.1e}, log_std {:.1e}, value {:.1e}, velocity {:.1e}, return {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn ramp_map(rows: usize, cols: usize) -> Heightmap {
    Heightmap { rows, cols, data: (0..rows * cols).map(|i| (i as f64 * 0.37).sin() * 0.3).collect() }
}

pub fn check_noise_identities(seed: u64) -> CheckResult {
    let mut failures = Vec::new();
    let map = ramp_map(12, 7);
    let mut buffer = DelayBuffer::new(0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in NoiseKind::EVAL.into_iter().chain([NoiseKind::Delay]) {
        let model = NoiseModel::for_episode(NoiseSpec { kind, level: 0.0 }, 3, &mut rng);
        let out = model.apply(&map, &buffer, &mut rng);
        if out.data.iter().zip(&map.data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures.push(format!("{kind} at level 0 changed the map"));
        }
    }

    // Full forward shift: every cell equals a fresh draw, in row-major order.
    let mut a = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut b = ChaCha8Rng::seed_from_u64(seed + 1);
    let shifted = apply_shift(&map, ShiftDirection::Forward, 1.0, &mut a);
    let normal = Normal::new(0.0, SIGMA_MAX).unwrap();
    for (i, v) in shifted.data.iter().enumerate() {
        let expect = normal.sample(&mut b);
        if *v != expect || *v == map.data[i] {
            failures.push(format!("shift cell {i} not replaced"));
        }
    }
    for positive in [false, true] {
        let lateral = apply_shift(&map, ShiftDirection::Lateral { positive }, 1.0, &mut a);
        if lateral.data.iter().zip(&map.data).any(|(x, y)| x == y) {
            failures.push("full lateral shift kept a cell".into());
        }
    }

    // Float: a constant offset of level * FLOAT_MAX, sign alternating by episode.
    for (ep, sign) in [(0u64, 1.0), (1, -1.0)] {
        let model = NoiseModel::for_episode(NoiseSpec { kind: NoiseKind::Float, level: 0.6 }, ep, &mut rng);
        let out = model.apply(&map, &buffer, &mut rng);
        let direct = apply_float(&map, sign * 0.6 * FLOAT_MAX);
        for (i, v) in out.data.iter().enumerate() {
            if *v != map.data[i] + sign * 0.6 * FLOAT_MAX || *v != direct.data[i] {
                failures.push(format!("float cell {i} episode {ep}"));
            }
        }
    }

    // Gaussian noise keeps shape and actually perturbs.
    let g = apply_gaussian(&map, 1.0, &mut rng);
    if g.data.len() != map.data.len() || g.data == map.data {
        failures.push("gaussian at level 1 left the map untouched".into());
    }

    // Delay: frame k pushes ago is served for delay k * dt.
    for k in 0..buffer.capacity() {
        let mut m = Heightmap::zeros(2, 2);
        m.data[0] = k as f64;
        buffer.push(m);
    }
    let current = Heightmap::zeros(2, 2);
    let newest = (buffer.capacity() - 1) as f64;
    for age in 0..buffer.capacity() {
        let delay = age as f64 * 0.02;
        let got =
            if age == 0 { buffer.get(0.0).unwrap().data[0] } else { apply_delay(&buffer, &current, delay).data[0] };
        if got != newest - age as f64 {
            failures.push(format!("delay {delay:.2}s served frame {got}"));
        }
    }
    result("noise_identities", failures, "level-0 identity, full shift, float offset, delay indexing".into())
}

/// The rule written out case by case, independently of [`desired_phase`].
fn truth_table_phase(incumbent: Phase, v_beats_b: bool, b_above_th: bool, dwell_expired: bool, locked: bool) -> Phase {
    let want = if v_beats_b && b_above_th { Phase::Vision } else { Phase::Blind };
    if !dwell_expired || locked {
        incumbent
    } else {
        want
    }
}

pub fn check_switch_rule(seed: u64) -> CheckResult {
    let mut failures = Vec::new();
    for incumbent in [Phase::Vision, Phase::Blind] {
        for bits in 0..16u32 {
            let v_beats_b = bits & 1 != 0;
            let b_above_th = bits & 2 != 0;
            let dwell_expired = bits & 4 != 0;
            let locked = bits & 8 != 0;
            let g_b = 1.0;
            let g_v = if v_beats_b { 2.0 } else { 0.5 };
            let g_th = if b_above_th { 0.0 } else { 1.5 };
            let got = suppress(incumbent, desired_phase(g_v, g_b, g_th, true), dwell_expired, locked);
            let want = truth_table_phase(incumbent, v_beats_b, b_above_th, dwell_expired, locked);
            if got != want {
                failures.push(format!("incumbent {incumbent:?} case {bits:04b}: {got:?} vs {want:?}"));
            }

            // Same case through the stateful composer. A constant window makes the
            // smoothed vision estimate equal the raw one.
            let alpha = if b_above_th { 0.5 } else { -0.5 };
            let cfg = ComposerConfig {
                switch_period: 10,
                alpha_threshold: alpha,
                smoothing_window: 1,
                v_lock: 1.5,
                ..Default::default()
            };
            let dwell = if dwell_expired { 9 } else { 3 };
            let mut state = ComposerState::with_phase(&cfg, incumbent, dwell);
            let speed = if locked { 2.0 } else { 0.5 };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let d = state.step(&cfg, g_v, g_b, speed, &mut rng);
            if d.phase != want {
                failures.push(format!("stateful incumbent {incumbent:?} case {bits:04b}: {:?} vs {want:?}", d.phase));
            }
        }
    }

    // Phase changes on random streams are at least T steps apart.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for period in [1u32, 3, 10, 50] {
        let cfg = ComposerConfig { switch_period: period, ..Default::default() };
        let mut state = ComposerState::new(&cfg);
        let mut last_switch: Option<usize> = None;
        let mut switches = 0usize;
        let steps = 2000;
        for t in 0..steps {
            let d = state.step(
                &cfg,
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..2.0),
                &mut rng,
            );
            if d.switched {
                if let Some(prev) = last_switch {
                    if t - prev < period as usize {
                        failures.push(format!("T={period}: switches at {prev} and {t}"));
                    }
                }
                last_switch = Some(t);
                switches += 1;
            }
        }
        if switches > steps / period as usize + 1 {
            failures.push(format!("T={period}: {switches} switches in {steps} steps"));
        }
    }
    result("switch_rule", failures, "32 table cases and dwell spacing on random streams".into())
}

pub fn check_softmax(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..200 {
        let n = rng.random_range(2..6usize);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let temp = rng.random_range(0.1..5.0);
        let p = softmax_probabilities(&q, temp);
        let z: f64 = q.iter().map(|v| (v / temp).exp()).sum();
        for i in 0..n {
            let closed = (q[i] / temp).exp() / z;
            if (p[i] - closed).abs() > 1e-12 {
                failures.push(format!("case {case} i={i}: {} vs {closed}", p[i]));
            }
        }
        // Dyadic values make `q + c` and the max subtraction exact, so invariance
        // must hold bit for bit.
        let qd: Vec<f64> = (0..n).map(|_| rng.random_range(-3072i32..=3072) as f64 / 1024.0).collect();
        let c = rng.random_range(-100_000i32..=100_000) as f64 / 1024.0;
        let shifted: Vec<f64> = qd.iter().map(|v| v + c).collect();
        if softmax_probabilities(&shifted, temp) != softmax_probabilities(&qd, temp) {
            failures.push(format!("case {case}: shift by {c} moved probabilities"));
        }
    }
    result("softmax", failures, "200 cases against the closed form".into())
}

/// Every check, in a stable order.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_lambda_return(1000, seed),
        check_gae(20, seed),
        check_gradients(20, seed),
        check_noise_identities(seed),
        check_switch_rule(seed),
        check_softmax(seed),
    ]
}
