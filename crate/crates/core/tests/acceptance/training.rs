//! Training and trend criteria. Policies are trained once per config hash and cached
//! under the cargo target tmpdir, so reruns only pay for evaluation.

use std::path::PathBuf;

use vbcom_core::checkpoint;
use vbcom_core::composer::{Phase, TargetKind};
use vbcom_core::config::{Method, RunConfig};
use vbcom_core::eval::{
    aggregate, episode_profile, run_cell, switch_latency_after_contact, trace_episode, Checkpoints,
};
use vbcom_core::noise::{NoiseKind, NoiseSpec};
use vbcom_core::rl::{retrain_estimator, train_policy, Agent, PolicyKind};

/// Flat stretches and hurdles at terrain level 0. Hurdles are taller than the step
/// height, so they must be jumped: the vision policy can time the jump from the map,
/// the blind one only after bumping into them.
const CONFIG: &str = r#"{
  "seed": 0,
  "terrain": {"tl_max": 0, "mix": {"gap": 0, "hurdle": 0.5, "wall": 0, "flat": 0.5}},
  "ppo": {"updates": 250, "num_envs": 32, "horizon": 256, "minibatch_size": 2048, "learning_rate": 0.001},
  "approximator": {"actor_hidden": [64, 64], "critic_hidden": [64, 64]},
  "eval": {"episodes": 10, "repeats": 3, "terrain_level": 0}
}"#;

const ESTIMATOR_UPDATES: usize = 30;
const ESTIMATOR_SEEDS: [u64; 3] = [11, 12, 13];

fn cached(kind: PolicyKind, cfg: &RunConfig) -> Agent {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-checkpoints");
    std::fs::create_dir_all(&dir).expect("checkpoint cache dir");
    let path = dir.join(format!("{}-{}.ckpt", cfg.hash(), kind.name()));
    if let Ok((agent, header)) = checkpoint::load(&path) {
        if header.config_hash == cfg.hash() && header.seed == cfg.seed {
            return agent;
        }
    }
    let out = train_policy(kind, cfg, cfg.seed).expect("training runs");
    checkpoint::save(&out.agent, &path, &cfg.hash(), cfg.seed).expect("checkpoint saves");
    out.agent
}

fn shift(level: f64) -> NoiseSpec {
    NoiseSpec { kind: NoiseKind::ShiftForward, level }
}

pub fn run() -> Vec<(u32, bool, String)> {
    let cfg = RunConfig::from_json_str(CONFIG).expect("acceptance config parses");
    let vision = cached(PolicyKind::Vision, &cfg);
    let blind = cached(PolicyKind::Blind, &cfg);
    let ck = Checkpoints { vision: Some(vision.clone()), blind: Some(blind.clone()), noisy_perceptive: None };
    // [goals, reward, velocity, fail, collision, reach] as (mean, std) over repeats.
    let cell = |m: Method, composer: &vbcom_core::composer::ComposerConfig, noise: NoiseSpec| {
        aggregate(&run_cell(&cfg, &ck, m, composer, noise).expect("evaluation runs"))
    };
    let tuned = cfg.composer.clone();
    let mut out = Vec::new();

    let vision_clean = cell(Method::Vision, &tuned, shift(0.0));
    let blind_clean = cell(Method::Blind, &tuned, shift(0.0));
    let composite_clean = cell(Method::Vbcom, &tuned, shift(0.0));
    let vision_shift = cell(Method::Vision, &tuned, shift(1.0));
    let composite_shift = cell(Method::Vbcom, &tuned, shift(1.0));

    out.push((
        8,
        blind_clean[0].0 >= 80.0 && vision_clean[4].0 < blind_clean[4].0,
        format!(
            "blind goals {:.2}% (need >= 80); collision steps vision {:.3}% < blind {:.3}%",
            blind_clean[0].0, vision_clean[4].0, blind_clean[4].0
        ),
    ));
    out.push((
        9,
        composite_shift[0].0 - vision_shift[0].0 >= 15.0,
        format!(
            "100% forward shift: composite goals {:.2}% vs vision {:.2}% (need gap >= 15 pp)",
            composite_shift[0].0, vision_shift[0].0
        ),
    ));
    out.push((
        10,
        composite_clean[4].0 < blind_clean[4].0,
        format!("0% noise: collision steps composite {:.3}% < blind {:.3}%", composite_clean[4].0, blind_clean[4].0),
    ));

    let mut no_threshold = tuned.clone();
    no_threshold.use_threshold = false;
    let without = cell(Method::Vbcom, &no_threshold, shift(1.0));
    out.push((
        11,
        without[0].0 < composite_shift[0].0,
        format!(
            "100% forward shift: goals without G_th {:.2}% < tuned alpha={} {:.2}%",
            without[0].0, tuned.alpha_threshold, composite_shift[0].0
        ),
    ));

    let mut terminal = Vec::new();
    for seed in ESTIMATOR_SEEDS {
        let mut losses = [0.0; 2];
        let mut relative = [0.0; 2];
        for (slot, target) in [TargetKind::MonteCarlo, TargetKind::TdLambda].into_iter().enumerate() {
            let mut c = cfg.clone();
            c.composer.target = target;
            let (_, curve) = retrain_estimator(&vision, &c, seed, ESTIMATOR_UPDATES).expect("estimator refit");
            losses[slot] = *curve.last().expect("non-empty loss curve");
            // The first loss is measured on an untrained net, so it tracks the mean squared target.
            relative[slot] = losses[slot] / curve[0];
        }
        terminal.push((seed, losses[0], losses[1], relative[0], relative[1]));
    }
    out.push((
        12,
        terminal.iter().all(|(_, mc, td, _, _)| mc > td),
        format!(
            "terminal estimator loss after {ESTIMATOR_UPDATES} updates, MC > TD-lambda per seed: {}",
            terminal
                .iter()
                .map(|(s, mc, td, rmc, rtd)| format!(
                    "seed {s}: {mc:.4} vs {td:.4} (relative to first update {rmc:.4} vs {rtd:.4})"
                ))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ));

    let mut latencies = Vec::new();
    let mut blind_at_contact = 0;
    for r in 0..cfg.eval.repeats {
        for e in 0..cfg.eval.episodes {
            let (profile, seed) = episode_profile(&cfg, r, e);
            let trace = trace_episode(&vision, &blind, &tuned, &cfg.env, &profile, shift(1.0), seed, &cfg.hash());
            latencies.push(switch_latency_after_contact(&trace));
            if trace.iter().find(|row| row.collision == 1).is_some_and(|row| row.phase == Phase::Blind.as_u8()) {
                blind_at_contact += 1;
            }
        }
    }
    let best = latencies.iter().flatten().min().copied();
    out.push((
        13,
        best.is_some_and(|l| l <= 25),
        format!(
            "100% forward shift, {} traces: fastest vision->blind switch after first contact {} steps (need <= 25); \
             blind already in control at first contact in {} traces",
            latencies.len(),
            best.map_or("none".to_string(), |l| l.to_string()),
            blind_at_contact
        ),
    ));
    out
}
