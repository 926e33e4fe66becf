//! Perception-deficiency models applied to the actor heightmap.
//!
//! Levels are fractions in `[0, 1]` for the Gaussian, shift and float kinds; the
//! delay kind takes its level in seconds. Every kernel is the exact identity at
//! level zero.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::heightmap::Heightmap;

/// Standard deviation (m) of Gaussian noise at level 1.0.
pub const SIGMA_MAX: f64 = 0.5;
/// Largest floating offset (m), reached at level 1.0.
pub const FLOAT_MAX: f64 = 0.5;
/// Longest perception delay (s).
pub const MAX_DELAY: f64 = 0.5;
/// Gaussian level applied during training.
pub const TRAINING_GAUSSIAN_LEVEL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianAdd,
    ShiftForward,
    ShiftLateral,
    Float,
    Delay,
    Zero,
}

impl NoiseKind {
    /// The four kinds swept by the evaluation suite.
    pub const EVAL: [NoiseKind; 4] =
        [NoiseKind::GaussianAdd, NoiseKind::ShiftForward, NoiseKind::ShiftLateral, NoiseKind::Float];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::GaussianAdd => "gaussian",
            NoiseKind::ShiftForward => "shift_forward",
            NoiseKind::ShiftLateral => "shift_lateral",
            NoiseKind::Float => "float",
            NoiseKind::Delay => "delay",
            NoiseKind::Zero => "zero",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
}

impl NoiseSpec {
    pub const CLEAN: NoiseSpec = NoiseSpec { kind: NoiseKind::ShiftForward, level: 0.0 };

    pub fn new(kind: NoiseKind, level: f64) -> Result<Self, String> {
        let spec = NoiseSpec { kind, level };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        let max = if self.kind == NoiseKind::Delay { MAX_DELAY } else { 1.0 };
        if self.kind != NoiseKind::Zero && !(0.0..=max).contains(&self.level) {
            return Err(format!("{} noise level must lie in [0, {max}], got {}", self.kind, self.level));
        }
        Ok(())
    }
}

impl FromStr for NoiseSpec {
    type Err = String;

    /// Parses `kind:level`, e.g. `shift:1.0` or `delay:0.3`. `shift` means forward shift.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, level) = match s.split_once(':') {
            Some((n, l)) => (n, l.parse::<f64>().map_err(|e| format!("bad noise level {l:?}: {e}"))?),
            None if s == "zero" || s == "none" => (s, 0.0),
            None => return Err(format!("expected kind:level, got {s:?}")),
        };
        let kind = match name {
            "gaussian" => NoiseKind::GaussianAdd,
            "shift" | "shift_forward" => NoiseKind::ShiftForward,
            "shift_lateral" | "lateral" => NoiseKind::ShiftLateral,
            "float" => NoiseKind::Float,
            "delay" => NoiseKind::Delay,
            "zero" => NoiseKind::Zero,
            "none" => return Ok(NoiseSpec::CLEAN),
            other => return Err(format!("unknown noise kind {other:?}")),
        };
        NoiseSpec::new(kind, level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDirection {
    /// Band grows from the far (forward) edge toward the agent.
    Forward,
    /// Band grows from one lateral edge; `positive` picks the +y side.
    Lateral { positive: bool },
}

fn band_width(level: f64, cells: usize) -> usize {
    // The epsilon keeps exact products like 0.7 * 10 from rounding down.
    (((level * cells as f64) + 1e-9).floor() as usize).min(cells)
}

pub fn apply_gaussian<R: Rng + ?Sized>(map: &Heightmap, level: f64, rng: &mut R) -> Heightmap {
    if level <= 0.0 {
        return map.clone();
    }
    let normal = Normal::new(0.0, level * SIGMA_MAX).expect("finite sigma");
    let mut out = map.clone();
    for v in &mut out.data {
        *v += normal.sample(rng);
    }
    out
}

pub fn apply_shift<R: Rng + ?Sized>(map: &Heightmap, direction: ShiftDirection, level: f64, rng: &mut R) -> Heightmap {
    let mut out = map.clone();
    if level <= 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, SIGMA_MAX).expect("finite sigma");
    match direction {
        ShiftDirection::Forward => {
            let n = band_width(level, map.rows);
            for r in map.rows - n..map.rows {
                for c in 0..map.cols {
                    out.set(r, c, normal.sample(rng));
                }
            }
        }
        ShiftDirection::Lateral { positive } => {
            let n = band_width(level, map.cols);
            let cols: Vec<usize> = if positive { (map.cols - n..map.cols).collect() } else { (0..n).collect() };
            for r in 0..map.rows {
                for &c in &cols {
                    out.set(r, c, normal.sample(rng));
                }
            }
        }
    }
    out
}

pub fn apply_float(map: &Heightmap, offset: f64) -> Heightmap {
    let mut out = map.clone();
    if offset != 0.0 {
        for v in &mut out.data {
            *v += offset;
        }
    }
    out
}

/// Ring buffer of past clean heightmaps, newest first.
#[derive(Debug, Clone)]
pub struct DelayBuffer {
    frames: VecDeque<Heightmap>,
    capacity: usize,
    dt: f64,
}

impl DelayBuffer {
    /// Buffer able to serve any delay up to [`MAX_DELAY`] at control period `dt`.
    pub fn new(dt: f64) -> Self {
        let capacity = (MAX_DELAY / dt).round() as usize + 1;
        DelayBuffer { frames: VecDeque::with_capacity(capacity), capacity, dt }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, map: Heightmap) {
        if self.frames.len() == self.capacity {
            self.frames.pop_back();
        }
        self.frames.push_front(map);
    }

    /// Frame whose age is closest to `delay` seconds, clamped to the oldest stored.
    pub fn get(&self, delay: f64) -> Option<&Heightmap> {
        let age = (delay.max(0.0) / self.dt).round() as usize;
        self.frames.get(age.min(self.frames.len().saturating_sub(1)))
    }
}

/// Stale frame for `delay` seconds; falls back to `current` when nothing is buffered.
pub fn apply_delay(buffer: &DelayBuffer, current: &Heightmap, delay: f64) -> Heightmap {
    if delay <= 0.0 {
        return current.clone();
    }
    buffer.get(delay).unwrap_or(current).clone()
}

/// Random delay in `[0, 0.5]` s followed by level-0.1 Gaussian noise.
pub fn training_noise_pipeline<R: Rng + ?Sized>(
    map: &Heightmap,
    buffer: &DelayBuffer,
    enabled: bool,
    rng: &mut R,
) -> Heightmap {
    if !enabled {
        return map.clone();
    }
    let delay = rng.random_range(0.0..=MAX_DELAY);
    let stale = apply_delay(buffer, map, delay);
    apply_gaussian(&stale, TRAINING_GAUSSIAN_LEVEL, rng)
}

/// Per-episode instance of an evaluation noise spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub spec: NoiseSpec,
    float_sign: f64,
    lateral_positive: bool,
}

impl NoiseModel {
    /// Float noise alternates sign with the episode index; the lateral band side is
    /// drawn once per episode.
    pub fn for_episode<R: Rng + ?Sized>(spec: NoiseSpec, episode_index: u64, rng: &mut R) -> Self {
        NoiseModel {
            spec,
            float_sign: if episode_index.is_multiple_of(2) { 1.0 } else { -1.0 },
            lateral_positive: rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.spec.kind != NoiseKind::Zero && self.spec.level == 0.0
    }

    pub fn apply<R: Rng + ?Sized>(&self, map: &Heightmap, buffer: &DelayBuffer, rng: &mut R) -> Heightmap {
        let level = self.spec.level;
        match self.spec.kind {
            NoiseKind::GaussianAdd => apply_gaussian(map, level, rng),
            NoiseKind::ShiftForward => apply_shift(map, ShiftDirection::Forward, level, rng),
            NoiseKind::ShiftLateral => {
                apply_shift(map, ShiftDirection::Lateral { positive: self.lateral_positive }, level, rng)
            }
            NoiseKind::Float => apply_float(map, self.float_sign * level * FLOAT_MAX),
            NoiseKind::Delay => apply_delay(buffer, map, level),
            NoiseKind::Zero => Heightmap::zeros(map.rows, map.cols),
        }
    }
}
