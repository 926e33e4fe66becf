use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vbcom_core::checkpoint;
use vbcom_core::composer::{lambda_return_targets, softmax_probabilities, ComposerConfig, ComposerState, Phase};
use vbcom_core::env::{
    build_observation, compute_reward, step_dynamics, Action, AgentState, EnvConfig, ObservationMode, PROPRIO_DIM,
};
use vbcom_core::eval::{aggregate, mean_std, reach_steps, run_episode, write_metric_csv, EpisodeMetrics, Scripted};
use vbcom_core::heightmap::{GridSpec, Heightmap};
use vbcom_core::nn::ApproximatorConfig;
use vbcom_core::nn::Mlp;
use vbcom_core::noise::{apply_shift, NoiseKind, NoiseSpec, ShiftDirection};
use vbcom_core::rl::{compute_gae, normalize_advantages, Agent, PolicyKind};
use vbcom_core::terrain::{
    curriculum_range, generate_profile, goal_direction, height_at, ObstacleKind, ObstacleMix, TerrainConfig,
    TerrainProfile,
};

fn hurdle_mix() -> TerrainConfig {
    TerrainConfig { mix: ObstacleMix { gap: 1.0, hurdle: 1.0, wall: 1.0, flat: 1.0 }, tl_max: 1, ..Default::default() }
}

fn profile(seed: u64, level: i64) -> TerrainProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_profile(&hurdle_mix(), level, seed, &mut rng).unwrap()
}

/// Direct scan of the obstacle list, written without the library's helpers.
fn scan_height(p: &TerrainProfile, x: f64, y: f64) -> f64 {
    if y.abs() > p.half_width {
        return 0.0;
    }
    let mut h = 0.0;
    for o in &p.obstacles {
        let y0 = o.lateral_center - o.extent_lateral / 2.0;
        let inside = x >= o.x_start && x < o.x_start + o.extent_forward && y >= y0 && y < y0 + o.extent_lateral;
        if inside && o.kind != ObstacleKind::Flat {
            h = o.height;
        }
    }
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curriculum_widens_with_level(level in 0i64..6) {
        for kind in [ObstacleKind::Gap, ObstacleKind::Hurdle, ObstacleKind::Wall] {
            let (lo, hi) = curriculum_range(kind, level).unwrap();
            let (lo2, hi2) = curriculum_range(kind, level + 1).unwrap();
            prop_assert!(hi > lo);
            prop_assert!(hi2 - lo2 >= hi - lo);
            prop_assert!(lo2 >= lo && hi2 >= hi);
        }
    }

    #[test]
    fn profile_is_pure_in_seed(seed in any::<u64>(), level in 0i64..=1) {
        let a = profile(seed, level);
        let b = profile(seed, level);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.validate(1).is_ok());
    }

    #[test]
    fn height_matches_scan_on_grid_and_corners(seed in any::<u64>(), level in 0i64..=1) {
        let p = profile(seed, level);
        let mut x = -0.5;
        while x < p.obstacles.last().unwrap().x_end() + 1.0 {
            let mut y = -2.5;
            while y <= 2.5 {
                prop_assert_eq!(height_at(&p, x, y), scan_height(&p, x, y), "x={} y={}", x, y);
                y += 0.05;
            }
            x += 0.05;
        }
        for o in p.obstacles.iter().filter(|o| o.kind != ObstacleKind::Flat) {
            let e = 1e-9;
            let xs = [o.x_start + e, o.x_end() - e];
            let ys = [o.y_min() + e, o.y_max() - e];
            for &cx in &xs {
                for &cy in &ys {
                    if cy.abs() <= p.half_width {
                        prop_assert_eq!(height_at(&p, cx, cy), o.height);
                    }
                }
            }
            prop_assert_eq!(height_at(&p, o.x_start - e, 0.0), scan_height(&p, o.x_start - e, 0.0));
        }
    }

    #[test]
    fn goal_direction_is_unit(tx in -50.0..50.0f64, ty in -50.0..50.0f64, fx in -50.0..50.0f64,
                              fy in -50.0..50.0f64, h in -4.0..4.0f64) {
        let d = goal_direction([tx, ty], [fx, fy], h);
        prop_assert!((d[0].hypot(d[1]) - 1.0).abs() <= 1e-9);
        let same = goal_direction([fx, fy], [fx, fy], h);
        prop_assert!((same[0].hypot(same[1]) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn free_flight_is_ballistic(z0 in 0.5..3.0f64, vz0 in -2.0..4.0f64, vx in -1.0..1.0f64) {
        let cfg = EnvConfig::default();
        let p = TerrainProfile::flat(&TerrainConfig::default());
        let mut s = AgentState::at(0.0, 0.0, 0.0);
        s.position[2] = z0;
        s.velocity = [vx, 0.0, vz0];
        s.grounded = false;
        s.pushed_since_ground = true;
        let (g, dt) = (cfg.gravity, cfg.dt);
        for n in 1..=20u32 {
            s = step_dynamics(&s, Action::default(), &p, &cfg).state;
            if s.grounded {
                break;
            }
            let nf = n as f64;
            // Semi-implicit Euler: velocity updates before position.
            let z = z0 + vz0 * nf * dt - g * dt * dt * nf * (nf + 1.0) / 2.0;
            prop_assert!((s.position[2] - z).abs() <= 1e-6, "step {}", n);
            prop_assert!((s.velocity[2] - (vz0 - g * dt * nf)).abs() <= 1e-9);
            prop_assert!((s.position[0] - vx * nf * dt).abs() <= 1e-9);
        }
    }

    #[test]
    fn critic_and_actor_maps_agree_on_overlap(seed in any::<u64>(), x in 0.0..30.0f64, y in -1.5..1.5f64) {
        let p = profile(seed, 1);
        let s = AgentState::at(x, y, 0.0);
        let hist = vec![0.0; EnvConfig::default().history_dim()];
        let actor = build_observation(&s, [0.0; PROPRIO_DIM], hist.clone(), &p, ObservationMode::ActorVision);
        let critic = build_observation(&s, [0.0; PROPRIO_DIM], hist, &p, ObservationMode::Critic);
        let (a, c) = (actor.heightmap.unwrap(), critic.heightmap.unwrap());
        let (ga, gc) = (GridSpec::ACTOR, GridSpec::CRITIC);
        let row_off = ((ga.forward.0 - gc.forward.0) / gc.resolution).round() as usize;
        let col_off = ((ga.lateral.0 - gc.lateral.0) / gc.resolution).round() as usize;
        for r in 0..a.rows {
            for col in 0..a.cols {
                prop_assert_eq!(a.get(r, col), c.get(r + row_off, col + col_off));
            }
        }
        prop_assert_eq!(actor.velocity, [0.0; 3]);
    }

    #[test]
    fn shift_replaces_exact_band(level in 0.0..=1.0f64, rows in 2usize..16, cols in 2usize..16,
                                 seed in any::<u64>(), lateral in any::<bool>()) {
        let map = Heightmap { rows, cols, data: vec![7.25; rows * cols] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = if lateral { ShiftDirection::Lateral { positive: seed % 2 == 0 } } else { ShiftDirection::Forward };
        let out = apply_shift(&map, dir, level, &mut rng);
        let changed = out.data.iter().filter(|v| **v != 7.25).count();
        let (axis, other) = if lateral { (cols, rows) } else { (rows, cols) };
        let band = ((level * axis as f64 + 1e-9).floor() as usize).min(axis);
        prop_assert_eq!(changed, band * other);
    }

    #[test]
    fn gae_returns_minus_values_is_advantage(
        seq in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, prop::bool::weighted(0.1)), 1..64),
        boot in -1.0..1.0f64, gamma in 0.8..1.0f64, lambda in 0.0..=1.0f64,
    ) {
        let r: Vec<f64> = seq.iter().map(|s| s.0).collect();
        let v: Vec<f64> = seq.iter().map(|s| s.1).collect();
        let d: Vec<bool> = seq.iter().map(|s| s.2).collect();
        let (adv, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda);
        for t in 0..r.len() {
            prop_assert_eq!(ret[t] - v[t], adv[t]);
        }
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_std(xs in prop::collection::vec(-100.0..100.0f64, 2..500)) {
        prop_assume!(xs.iter().any(|x| (x - xs[0]).abs() > 1e-3));
        let mut a = xs.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-6);
        prop_assert!((std - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn lambda_targets_match_direct_sum(g in prop::collection::vec(-5.0..5.0f64, 1..120), period in 1usize..100,
                                       lambda in 0.0..0.999f64) {
        let got = lambda_return_targets(&g, period, lambda, false).unwrap();
        for t in 0..g.len() {
            let mut want = 0.0;
            for k in 0..=period {
                if t + k < g.len() {
                    want += lambda.powi(k as i32) * g[t + k];
                }
            }
            want *= 1.0 - lambda;
            prop_assert!((got[t] - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(q in prop::collection::vec(-512i32..512, 2..6), c in -256i32..256, temp_pow in -2i32..3) {
        // Dyadic inputs keep the shifted values exactly representable.
        let q: Vec<f64> = q.iter().map(|v| *v as f64 / 64.0).collect();
        let shifted: Vec<f64> = q.iter().map(|v| v + c as f64 / 8.0).collect();
        let temp = 2f64.powi(temp_pow);
        let p = softmax_probabilities(&q, temp);
        prop_assert_eq!(&p, &softmax_probabilities(&shifted, temp));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn switches_respect_the_dwell(period in 1u32..40, seed in any::<u64>(), steps in 50usize..400) {
        let cfg = ComposerConfig { switch_period: period, ..Default::default() };
        let mut state = ComposerState::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_switch: Option<usize> = None;
        for t in 0..steps {
            let d = state.step(&cfg, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0),
                                rng.random_range(0.0..2.0), &mut rng);
            if d.switched {
                if let Some(prev) = last_switch {
                    prop_assert!(t - prev >= period as usize, "switches at {} and {}", prev, t);
                }
                last_switch = Some(t);
            }
        }
    }

    #[test]
    fn std_over_repeats_is_sample_std(means in prop::collection::vec(prop::collection::vec(0.0..100.0f64, 1..6), 1..6)) {
        let per_repeat: Vec<Vec<EpisodeMetrics>> = means.iter().map(|eps| eps.iter().map(|g| EpisodeMetrics {
            goals_completed_pct: *g, episode_reward: 0.0, average_velocity: 0.0, fail: 0.0,
            collision_steps_pct: 0.0, reach_steps: f64::NAN,
        }).collect()).collect();
        let repeat_means: Vec<f64> = means.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect();
        let n = repeat_means.len() as f64;
        let m = repeat_means.iter().sum::<f64>() / n;
        let s = if repeat_means.len() < 2 { 0.0 }
                else { (repeat_means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        let (gm, gs) = aggregate(&per_repeat)[0];
        prop_assert!((gm - m).abs() <= 1e-9);
        prop_assert!((gs - s).abs() <= 1e-9);
        prop_assert_eq!(mean_std(&repeat_means).1, gs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Random scripted runners: reproducible, goal index never drops, bounded reward
    /// terms, and reach steps never exceed the episode length.
    #[test]
    fn scripted_episodes_hold_invariants(seed in any::<u64>(), fwd in -0.2..1.0f64, lat in -0.5..0.5f64,
                                         jump_every in 5usize..60) {
        let cfg = EnvConfig { episode_seconds: 12.0, ..Default::default() };
        let p = profile(seed, 0);
        let run = || {
            let mut k = 0usize;
            let mut c = Scripted { f: |_: &AgentState, _: &_| {
                k += 1;
                [fwd, lat * ((k as f64) * 0.05).sin(), if k.is_multiple_of(jump_every) { 0.9 } else { 0.0 }]
            } };
            run_episode(&mut c, &cfg, &p, NoiseSpec { kind: NoiseKind::GaussianAdd, level: 0.0 }, 0, seed).0
        };
        let traj = run();
        prop_assert_eq!(&traj, &run());
        let mut prev = 0;
        for s in &traj.steps {
            prop_assert!(s.goal_index >= prev);
            prev = s.goal_index;
            prop_assert!(s.r_goal_velocity >= 0.0 && s.r_goal_velocity <= cfg.reward.goal_velocity);
            let hits = s.r_collision / cfg.reward.collision;
            prop_assert!(hits >= 0.0 && hits.fract() == 0.0);
            prop_assert!(!(s.terminated && s.truncated));
        }
        prop_assert!(reach_steps(&traj).iter().sum::<usize>() <= traj.steps.len());
    }
}

#[test]
fn reward_components_bounded_at_sampled_states() {
    let cfg = EnvConfig::default();
    let p = profile(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let mut s =
            AgentState::at(rng.random_range(0.0..30.0), rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0));
        s.velocity = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        s.contact_forces = std::array::from_fn(|_| if rng.random_bool(0.3) { 5.0 } else { 0.0 });
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)];
        let (_, terms) = compute_reward(&s, &a, &[0.0; 3], &p, &cfg);
        assert!((0.0..=1.0).contains(&terms.goal_velocity));
        let w = terms.weighted(&cfg.reward);
        assert!(w.collisions <= 0.0 && (w.collisions / -15.0).fract() == 0.0);
    }
}

#[test]
fn estimator_input_is_history_only() {
    let env = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [PolicyKind::Vision, PolicyKind::Blind] {
        let agent = Agent::new(kind, &env, &ApproximatorConfig::default(), &ComposerConfig::default(), &mut rng);
        assert_eq!(agent.estimator.net.input_dim(), env.history_dim());
        assert_eq!(env.history_dim(), PROPRIO_DIM * env.history_len);
        assert!(agent.estimator.check_input(env.history_dim()).is_ok());
        assert!(agent.estimator.check_input(env.history_dim() + GridSpec::ACTOR.cells()).is_err());
    }
}

#[test]
fn forward_backward_are_pure_and_params_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Mlp::new(&[5, 7, 3], 1.0, &mut rng);
    let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
    let (y1, c1) = net.forward_batch(&x);
    let (y2, c2) = net.forward_batch(&x);
    assert_eq!(y1, y2);
    let g = Array2::from_shape_fn(y1.dim(), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.5);
    assert_eq!(net.backward(&c1, &g), net.backward(&c2, &g));
    let copy = Mlp::from_params(net.sizes(), net.params().to_vec()).unwrap();
    assert_eq!(copy.params(), net.params());
}

#[test]
fn checkpoint_round_trip_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let agent = Agent::new(
        PolicyKind::Vision,
        &EnvConfig::default(),
        &ApproximatorConfig::default(),
        &ComposerConfig::default(),
        &mut rng,
    );
    let bytes = checkpoint::encode(&agent, "0123456789abcdef", 42).unwrap();
    let (back, header) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(header.config_hash, "0123456789abcdef");
    assert_eq!(header.seed, 42);
    assert_eq!(checkpoint::encode(&back, "0123456789abcdef", 42).unwrap(), bytes);
}

#[test]
fn metric_csv_header_is_golden() {
    let mut buf = Vec::new();
    write_metric_csv(&[], &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap().trim_end(),
        "method,noise_kind,noise_level,goals_completed_pct_mean,goals_completed_pct_std,episode_reward_mean,\
         episode_reward_std,average_velocity_mean,average_velocity_std,fail_rate_mean,fail_rate_std,\
         collision_steps_pct_mean,collision_steps_pct_std,reach_steps_mean,reach_steps_std,episodes,repeats,\
         config_hash,seed"
    );
}

#[test]
fn initial_phase_is_vision() {
    let cfg = ComposerConfig::default();
    assert_eq!(ComposerState::new(&cfg).phase(), Phase::Vision);
}
