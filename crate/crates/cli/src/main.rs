//! `vbcom`: train policies, run evaluation suites and ablations, dump switching
//! traces, and run the oracle self-checks.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use vbcom_core::checkpoint;
use vbcom_core::config::{sha256_hex, RunConfig};
use vbcom_core::eval::{
    self, episode_profile, run_ablations, run_suite, trace_episode, write_ablation_csv, write_metric_csv,
    write_trace_csv, write_trajectory_csv, AblationKind, AblationSetup, Checkpoints, Composite,
};
use vbcom_core::noise::NoiseSpec;
use vbcom_core::rl::{train_policy_with, Agent, CurveRow, PolicyKind};
use vbcom_core::selftest;
use vbcom_core::Error;

const OUTPUT_DIR_VAR: &str = "VBCOM_OUTPUT_DIR";
const WORKERS_VAR: &str = "VBCOM_WORKERS";

#[derive(Parser)]
#[command(name = "vbcom", version, about = "Vision/blind policy composition workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy with PPO and write its checkpoint, curve and manifest.
    Train {
        #[arg(long)]
        kind: PolicyKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate every method over the noise grid.
    Eval {
        #[arg(long, default_value = "table2")]
        suite: String,
        /// Directory holding `<kind>.ckpt` files (default: `<output_dir>/checkpoints`).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Composite ablation over switch period, threshold margin or estimator targets.
    Ablate {
        #[arg(long)]
        kind: AblationKind,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation noise, e.g. `shift:1.0`.
        #[arg(long, default_value = "shift:1.0")]
        noise: NoiseSpec,
        /// PPO-sized updates used to refit return estimators for period/estimator rows.
        #[arg(long, default_value_t = 30)]
        estimator_updates: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-step composite trace for one episode.
    Trace {
        #[arg(long, default_value = "shift:1.0")]
        noise: NoiseSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
        /// Also write the full per-step trajectory here.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the oracle checks; exits nonzero on any failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUTPUT_DIR_VAR) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Ok(w) = std::env::var(WORKERS_VAR) {
        let n: usize = w.parse().with_context(|| format!("{WORKERS_VAR}={w:?} is not a count"))?;
        cfg.ppo.workers = n;
        cfg.eval.workers = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve `p` inside the output directory; anything that would land outside is an error.
fn confine(out_dir: &Path, p: &Path) -> Result<PathBuf> {
    let rel = if p.is_absolute() {
        match p.strip_prefix(out_dir) {
            Ok(r) => r.to_path_buf(),
            Err(_) => bail!("{} is outside the output directory {}", p.display(), out_dir.display()),
        }
    } else {
        p.to_path_buf()
    };
    if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        bail!("{} escapes the output directory {}", p.display(), out_dir.display());
    }
    Ok(out_dir.join(rel))
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    seeds: Vec<u64>,
    /// sha256 of every checkpoint read or written.
    checkpoints: Vec<(String, String)>,
    outputs: Vec<String>,
    elapsed_seconds: f64,
    config: &'a RunConfig,
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig, arg: Option<&Path>) -> PathBuf {
    arg.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("checkpoints"))
}

/// Load whichever of the three checkpoints exist; hashes go into the manifest.
fn load_checkpoints(dir: &Path) -> Result<(Checkpoints, Vec<(String, String)>)> {
    let mut ck = Checkpoints::default();
    let mut hashes = Vec::new();
    for kind in [PolicyKind::Vision, PolicyKind::Blind, PolicyKind::NoisyPerceptive] {
        let path = dir.join(format!("{}.ckpt", kind.name()));
        if !path.exists() {
            continue;
        }
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let (agent, header) = checkpoint::decode(&bytes).with_context(|| format!("loading {}", path.display()))?;
        if header.kind != kind {
            bail!("{} holds a {} policy", path.display(), header.kind.name());
        }
        hashes.push((path.display().to_string(), sha256_hex(&bytes)));
        match kind {
            PolicyKind::Vision => ck.vision = Some(agent),
            PolicyKind::Blind => ck.blind = Some(agent),
            PolicyKind::NoisyPerceptive => ck.noisy_perceptive = Some(agent),
        }
    }
    Ok((ck, hashes))
}

const CURVE_COLUMNS: [&str; 14] = [
    "update",
    "mean_step_reward",
    "mean_episode_reward",
    "mean_goals",
    "episodes",
    "terrain_level",
    "policy_loss",
    "value_loss",
    "velocity_loss",
    "return_loss",
    "entropy",
    "approx_kl",
    "config_hash",
    "seed",
];

fn write_curve(path: &Path, curve: &[CurveRow], hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(CURVE_COLUMNS)?;
    for r in curve {
        let nums = [
            r.mean_step_reward,
            r.mean_episode_reward,
            r.mean_goals,
            r.episodes as f64,
            r.terrain_level,
            r.policy_loss,
            r.value_loss,
            r.velocity_loss,
            r.return_loss,
            r.entropy,
            r.approx_kl,
        ];
        let mut rec = vec![r.update.to_string()];
        rec.extend(nums.iter().map(f64::to_string));
        rec.push(hash.to_string());
        rec.push(seed.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(kind: PolicyKind, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let hash = cfg.hash();
    let t0 = Instant::now();
    let every = (cfg.ppo.updates / 20).max(1);
    let result = train_policy_with(kind, &cfg, cfg.seed, |r| {
        if r.update % every == every - 1 || r.update + 1 == cfg.ppo.updates {
            eprintln!(
                "[{}] update {:>4}/{} reward/step {:.4} goals {:.2} level {:.2} ({:.0}s)",
                kind.name(),
                r.update + 1,
                cfg.ppo.updates,
                r.mean_step_reward,
                r.mean_goals,
                r.terrain_level,
                t0.elapsed().as_secs_f64()
            );
        }
    });
    let (agent, curve, failure) = match result {
        Ok(out) => (out.agent, out.curve, None),
        Err(Error::Diverged { source, last_good, curve }) => (*last_good, curve, Some(source)),
        Err(e) => return Err(e.into()),
    };
    let ck_path = confine(&cfg.output_dir, &PathBuf::from("checkpoints").join(format!("{}.ckpt", kind.name())))?;
    let curve_path = confine(&cfg.output_dir, Path::new(&format!("train_{}_curve.csv", kind.name())))?;
    let manifest_path = confine(&cfg.output_dir, Path::new(&format!("train_{}_manifest.json", kind.name())))?;
    let bytes = checkpoint::save(&agent, &ck_path, &hash, cfg.seed)?;
    write_curve(&curve_path, &curve, &hash, cfg.seed)?;
    write_manifest(
        &manifest_path,
        &Manifest {
            command: "train",
            config_hash: hash.clone(),
            seed: cfg.seed,
            seeds: vec![cfg.seed],
            checkpoints: vec![(ck_path.display().to_string(), sha256_hex(&bytes))],
            outputs: vec![ck_path.display().to_string(), curve_path.display().to_string()],
            elapsed_seconds: t0.elapsed().as_secs_f64(),
            config: &cfg,
        },
    )?;
    println!("{} {}", sha256_hex(&bytes), ck_path.display());
    if let Some(e) = failure {
        bail!("training stopped early ({e}); saved the last finite parameters");
    }
    Ok(())
}

fn cmd_eval(suite: &str, checkpoints: Option<&Path>, out: &Path, config: Option<&Path>) -> Result<()> {
    if suite != "table2" {
        bail!("unknown suite {suite:?} (available: table2)");
    }
    let cfg = load_config(config)?;
    let out = confine(&cfg.output_dir, out)?;
    let t0 = Instant::now();
    let (ck, hashes) = load_checkpoints(&checkpoint_dir(&cfg, checkpoints))?;
    let rows = run_suite(&cfg, &ck)?;
    write_metric_csv(&rows, create(&out)?)?;
    let manifest = out.with_extension("manifest.json");
    write_manifest(
        &manifest,
        &Manifest {
            command: "eval",
            config_hash: cfg.hash(),
            seed: cfg.seed,
            seeds: suite_seeds(&cfg),
            checkpoints: hashes,
            outputs: vec![out.display().to_string()],
            elapsed_seconds: t0.elapsed().as_secs_f64(),
            config: &cfg,
        },
    )?;
    println!("{} rows -> {}", rows.len(), out.display());
    Ok(())
}

fn suite_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.repeats)
        .flat_map(|r| (0..cfg.eval.episodes).map(move |e| (r, e)))
        .map(|(r, e)| episode_profile(cfg, r, e).1)
        .collect()
}

fn require<'a>(agent: &'a Option<Agent>, name: &str) -> Result<&'a Agent> {
    agent.as_ref().ok_or_else(|| Error::Checkpoint(format!("missing checkpoint for method {name}")).into())
}

fn cmd_ablate(
    kind: AblationKind,
    checkpoints: Option<&Path>,
    out: Option<&Path>,
    noise: NoiseSpec,
    estimator_updates: usize,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let default_name = PathBuf::from(format!("ablation_{}.csv", serde_json::to_value(kind)?.as_str().unwrap_or("x")));
    let out = confine(&cfg.output_dir, out.unwrap_or(&default_name))?;
    let t0 = Instant::now();
    let (ck, hashes) = load_checkpoints(&checkpoint_dir(&cfg, checkpoints))?;
    let vision = require(&ck.vision, "vision")?;
    let blind = require(&ck.blind, "blind")?;
    let rows = run_ablations(kind, &cfg, vision, blind, &AblationSetup { noise, estimator_updates })?;
    write_ablation_csv(&rows, create(&out)?)?;
    write_manifest(
        &out.with_extension("manifest.json"),
        &Manifest {
            command: "ablate",
            config_hash: cfg.hash(),
            seed: cfg.seed,
            seeds: suite_seeds(&cfg),
            checkpoints: hashes,
            outputs: vec![out.display().to_string()],
            elapsed_seconds: t0.elapsed().as_secs_f64(),
            config: &cfg,
        },
    )?;
    println!("{} rows -> {}", rows.len(), out.display());
    Ok(())
}

fn cmd_trace(
    noise: NoiseSpec,
    seed: u64,
    out: &Path,
    trajectory: Option<&Path>,
    checkpoints: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let out = confine(&cfg.output_dir, out)?;
    let traj_out = trajectory.map(|p| confine(&cfg.output_dir, p)).transpose()?;
    let t0 = Instant::now();
    let (ck, hashes) = load_checkpoints(&checkpoint_dir(&cfg, checkpoints))?;
    let vision = require(&ck.vision, "vision")?;
    let blind = require(&ck.blind, "blind")?;
    let (profile, ep_seed) = episode_profile(&cfg, 0, seed as usize);
    let hash = cfg.hash();
    let rows = trace_episode(vision, blind, &cfg.composer, &cfg.env, &profile, noise, ep_seed, &hash);
    write_trace_csv(&rows, create(&out)?)?;
    let mut outputs = vec![out.display().to_string()];
    if let Some(p) = traj_out {
        let mut c = Composite::new(vision, blind, cfg.composer.clone(), vbcom_core::derive_seed(ep_seed, 0x50F7));
        let (traj, _) = eval::run_episode(&mut c, &cfg.env, &profile, noise, 0, ep_seed);
        write_trajectory_csv(&traj, create(&p)?)?;
        outputs.push(p.display().to_string());
    }
    write_manifest(
        &out.with_extension("manifest.json"),
        &Manifest {
            command: "trace",
            config_hash: hash,
            seed: cfg.seed,
            seeds: vec![ep_seed],
            checkpoints: hashes,
            outputs,
            elapsed_seconds: t0.elapsed().as_secs_f64(),
            config: &cfg,
        },
    )?;
    println!("{} steps -> {}", rows.len(), out.display());
    Ok(())
}

fn cmd_selftest(seed: u64) -> Result<bool> {
    let mut ok = true;
    for r in selftest::run_all(seed) {
        println!("{} {:<18} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { kind, config, seed } => cmd_train(*kind, config.as_deref(), *seed).map(|_| true),
        Command::Eval { suite, checkpoints, out, config } => {
            cmd_eval(suite, checkpoints.as_deref(), out, config.as_deref()).map(|_| true)
        }
        Command::Ablate { kind, checkpoints, out, noise, estimator_updates, config } => {
            cmd_ablate(*kind, checkpoints.as_deref(), out.as_deref(), *noise, *estimator_updates, config.as_deref())
                .map(|_| true)
        }
        Command::Trace { noise, seed, out, trajectory, checkpoints, config } => {
            cmd_trace(*noise, *seed, out, trajectory.as_deref(), checkpoints.as_deref(), config.as_deref())
                .map(|_| true)
        }
        Command::Selftest { seed } => cmd_selftest(*seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
