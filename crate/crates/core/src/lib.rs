//! Terrain, toy locomotion dynamics, PPO training and policy composition for
//! comparing vision, blind and switched controllers under perception noise.

// Validation writes `!(x > 0.0)` so NaN is rejected along with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod composer;
pub mod config;
pub mod env;
pub mod eval;
pub mod heightmap;
pub mod nn;
pub mod noise;
pub mod rl;
pub mod selftest;
pub mod terrain;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Terrain(#[from] terrain::TerrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at update {update}: {what}")]
    NonFinite { update: usize, what: String },
    /// Training hit a non-finite loss; carries the last parameters that were finite.
    #[error("{source}")]
    Diverged { source: Box<Error>, last_good: Box<rl::Agent>, curve: Vec<rl::CurveRow> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Derive an independent stream seed from a base seed and a tag (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
