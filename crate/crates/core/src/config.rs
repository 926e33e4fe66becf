//! Run configuration: every block has defaults, unknown keys are rejected, and the
//! hash is taken over a canonical (key-sorted) JSON rendering.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::ComposerConfig;
use crate::env::EnvConfig;
use crate::nn::ApproximatorConfig;
use crate::noise::NoiseKind;
use crate::rl::PpoConfig;
use crate::terrain::{ObstacleMix, TerrainConfig};
use crate::Error;

/// Perception noise used while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Random delay plus light Gaussian noise on the vision policy's heightmap.
    pub training_pipeline: bool,
    /// Share of vision training episodes that see clean maps. Without it the policy
    /// calibrates its jump timing to stale frames and mistimes on clean ones.
    pub clean_fraction: f64,
    /// Kinds drawn by the noisy-perceptive baseline's noise curriculum.
    pub curriculum_kinds: Vec<NoiseKind>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { training_pipeline: true, clean_fraction: 0.5, curriculum_kinds: NoiseKind::EVAL.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vbcom,
    Vision,
    Blind,
    NoisyPerceptive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vbcom => "vbcom",
            Method::Vision => "vision",
            Method::Blind => "blind",
            Method::NoisyPerceptive => "noisy_perceptive",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vbcom" | "composite" => Ok(Method::Vbcom),
            "vision" => Ok(Method::Vision),
            "blind" => Ok(Method::Blind),
            "noisy" | "noisy_perceptive" => Ok(Method::NoisyPerceptive),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Evaluation suite settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub noise_kinds: Vec<NoiseKind>,
    pub noise_levels: Vec<f64>,
    pub episodes: usize,
    pub repeats: usize,
    /// Defaults to the terrain config's `tl_max`.
    pub terrain_level: Option<u32>,
    /// Defaults to the terrain config's mix.
    pub mix: Option<ObstacleMix>,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            methods: vec![Method::Vbcom, Method::Vision, Method::Blind, Method::NoisyPerceptive],
            noise_kinds: NoiseKind::EVAL.to_vec(),
            noise_levels: vec![0.0, 0.3, 0.7, 1.0],
            episodes: 10,
            repeats: 3,
            terrain_level: None,
            mix: None,
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.episodes < 1 {
            return Err("eval.episodes must be ≥ 1".into());
        }
        if self.repeats < 1 {
            return Err("eval.repeats must be ≥ 1".into());
        }
        if self.workers < 1 {
            return Err("eval.workers must be ≥ 1".into());
        }
        if self.noise_levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err("eval.noise_levels must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub terrain: TerrainConfig,
    pub env: EnvConfig,
    pub noise: NoiseConfig,
    pub approximator: ApproximatorConfig,
    pub ppo: PpoConfig,
    pub composer: ComposerConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            terrain: TerrainConfig::default(),
            env: EnvConfig::default(),
            noise: NoiseConfig::default(),
            approximator: ApproximatorConfig::default(),
            ppo: PpoConfig::default(),
            composer: ComposerConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.terrain.validate().map_err(|e| Error::Config(format!("terrain: {e}")))?;
        self.env.validate().map_err(|e| Error::Config(format!("env.{e}")))?;
        self.approximator.validate().map_err(Error::Config)?;
        self.ppo.validate().map_err(Error::Config)?;
        self.composer.validate().map_err(Error::Config)?;
        self.eval.validate().map_err(Error::Config)?;
        if !(0.0..=1.0).contains(&self.noise.clean_fraction) {
            return Err(Error::Config("noise.clean_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, Error> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Canonical JSON: `serde_json::Value` keeps object keys sorted.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        short_hash(self.canonical_json().as_bytes())
    }

    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash(), 16).expect("hex digest")
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
