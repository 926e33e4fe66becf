//! Procedural obstacle tracks.
//!
//! A track is a straight corridor along +x with eight obstacle slots. Each slot
//! holds one gap, hurdle, wall or flat stretch and is followed by a goal
//! waypoint. Obstacle dimensions scale linearly with the terrain level.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of goal waypoints (and obstacle slots) on every track.
pub const GOALS_PER_TRACK: usize = 8;

/// Planar point or vector, `[x, y]`.
pub type Vec2 = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum TerrainError {
    #[error("terrain level must be non-negative, got {0}")]
    NegativeLevel(i64),
    #[error("terrain level {level} exceeds configured maximum {max}")]
    LevelAboveMax { level: i64, max: u32 },
    #[error("flat stretches have no curriculum range")]
    FlatHasNoRange,
    #[error("invalid terrain config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Gap,
    Hurdle,
    Wall,
    Flat,
}

impl ObstacleKind {
    pub const ALL: [ObstacleKind; 4] =
        [ObstacleKind::Gap, ObstacleKind::Hurdle, ObstacleKind::Wall, ObstacleKind::Flat];
}

/// One axis-aligned obstacle footprint.
///
/// `extent_forward` runs along the track, `extent_lateral` across it. Gaps have a
/// negative `height` (their floor depth); flat stretches have height 0 and are
/// ignored by [`height_at`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub kind: ObstacleKind,
    pub x_start: f64,
    pub extent_forward: f64,
    pub extent_lateral: f64,
    pub height: f64,
    pub lateral_center: f64,
}

impl ObstacleSpec {
    pub fn x_end(&self) -> f64 {
        self.x_start + self.extent_forward
    }

    pub fn y_min(&self) -> f64 {
        self.lateral_center - 0.5 * self.extent_lateral
    }

    pub fn y_max(&self) -> f64 {
        self.lateral_center + 0.5 * self.extent_lateral
    }

    /// Half-open footprint test: `[x_start, x_end) x [y_min, y_max)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_start && x < self.x_end() && y >= self.y_min() && y < self.y_max()
    }

    /// True when the footprint intersects the open rectangle `(x0, x1) x (y0, y1)`.
    pub fn overlaps(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
        self.x_start < x1 && self.x_end() > x0 && self.y_min() < y1 && self.y_max() > y0
    }

    pub fn is_solid(&self) -> bool {
        matches!(self.kind, ObstacleKind::Hurdle | ObstacleKind::Wall)
    }

    fn check(&self) -> Result<(), TerrainError> {
        let bad = |m: &str| Err(TerrainError::InvalidConfig(format!("{:?}: {m}", self.kind)));
        if !(self.extent_forward > 0.0) || !(self.extent_lateral > 0.0) {
            return bad("extents must be positive");
        }
        match self.kind {
            ObstacleKind::Gap if self.height >= 0.0 => bad("gap height must be negative"),
            ObstacleKind::Hurdle | ObstacleKind::Wall if self.height <= 0.0 => {
                bad("solid obstacle height must be positive")
            }
            ObstacleKind::Flat if self.height != 0.0 => bad("flat stretch must have zero height"),
            _ => Ok(()),
        }
    }
}

/// Relative sampling weights of each obstacle kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleMix {
    pub gap: f64,
    pub hurdle: f64,
    pub wall: f64,
    pub flat: f64,
}

impl Default for ObstacleMix {
    fn default() -> Self {
        ObstacleMix { gap: 1.0, hurdle: 1.0, wall: 1.0, flat: 0.0 }
    }
}

impl ObstacleMix {
    pub fn only(kind: ObstacleKind) -> Self {
        let mut mix = ObstacleMix { gap: 0.0, hurdle: 0.0, wall: 0.0, flat: 0.0 };
        *mix.weight_mut(kind) = 1.0;
        mix
    }

    pub fn weight(&self, kind: ObstacleKind) -> f64 {
        match kind {
            ObstacleKind::Gap => self.gap,
            ObstacleKind::Hurdle => self.hurdle,
            ObstacleKind::Wall => self.wall,
            ObstacleKind::Flat => self.flat,
        }
    }

    pub fn weight_mut(&mut self, kind: ObstacleKind) -> &mut f64 {
        match kind {
            ObstacleKind::Gap => &mut self.gap,
            ObstacleKind::Hurdle => &mut self.hurdle,
            ObstacleKind::Wall => &mut self.wall,
            ObstacleKind::Flat => &mut self.flat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    pub track_length: f64,
    pub half_width: f64,
    /// Clear run-up between the end of one obstacle and the start of the next.
    pub spacing_min: f64,
    pub spacing_max: f64,
    /// Distance from an obstacle's far edge to its waypoint.
    pub waypoint_offset: f64,
    /// Forward length of a flat slot.
    pub flat_length: f64,
    pub mix: ObstacleMix,
    pub tl_max: u32,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        TerrainConfig {
            track_length: 40.0,
            half_width: 2.0,
            spacing_min: 2.5,
            spacing_max: 3.5,
            waypoint_offset: 1.0,
            flat_length: 0.5,
            mix: ObstacleMix::default(),
            tl_max: 1,
        }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<(), TerrainError> {
        let bad = |m: String| Err(TerrainError::InvalidConfig(m));
        if !(self.half_width > 0.0) {
            return bad(format!("half_width must be > 0, got {}", self.half_width));
        }
        if !(self.spacing_min > 0.0) || self.spacing_max < self.spacing_min {
            return bad(format!(
                "spacing bounds must satisfy 0 < min <= max, got [{}, {}]",
                self.spacing_min, self.spacing_max
            ));
        }
        if !(self.flat_length > 0.0) || self.waypoint_offset < 0.0 {
            return bad("flat_length must be > 0 and waypoint_offset >= 0".into());
        }
        if self.waypoint_offset >= self.spacing_min {
            return bad("waypoint_offset must be smaller than spacing_min".into());
        }
        let weights = ObstacleKind::ALL.map(|k| self.mix.weight(k));
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return bad("obstacle mix weights must be non-negative with a positive sum".into());
        }
        let worst_slot = ObstacleKind::ALL
            .iter()
            .filter(|k| self.mix.weight(**k) > 0.0)
            .map(|k| self.max_forward_extent(*k))
            .fold(0.0, f64::max);
        let needed = GOALS_PER_TRACK as f64 * (self.spacing_max + worst_slot) + self.waypoint_offset;
        if needed > self.track_length {
            return bad(format!("8 obstacles need up to {needed:.2} m but track_length is {}", self.track_length));
        }
        Ok(())
    }

    /// Largest forward extent a slot of `kind` can take at `tl_max`.
    fn max_forward_extent(&self, kind: ObstacleKind) -> f64 {
        match kind {
            ObstacleKind::Gap => curriculum_range(kind, self.tl_max as i64).map(|r| r.1).unwrap_or(0.0),
            ObstacleKind::Hurdle => HURDLE_THICKNESS.1,
            ObstacleKind::Wall => WALL_THICKNESS.1,
            ObstacleKind::Flat => self.flat_length,
        }
    }
}

// Fixed (non-curriculum) dimensions, meters.
const GAP_DEPTH: (f64, f64) = (-1.8, -1.5);
const HURDLE_THICKNESS: (f64, f64) = (0.1, 0.2);
const WALL_THICKNESS: (f64, f64) = (0.2, 0.4);
const WALL_HEIGHT: (f64, f64) = (1.4, 1.8);
const WALL_CENTER_SPREAD: f64 = 0.5;

/// Curriculum range of the difficulty dimension of `kind` at terrain `level`:
/// gap width along travel, hurdle height, or wall length across travel.
pub fn curriculum_range(kind: ObstacleKind, level: i64) -> Result<(f64, f64), TerrainError> {
    if level < 0 {
        return Err(TerrainError::NegativeLevel(level));
    }
    let tl = level as f64;
    match kind {
        ObstacleKind::Gap => Ok((0.1 + 0.5 * tl, 0.2 + 0.6 * tl)),
        ObstacleKind::Hurdle | ObstacleKind::Wall => Ok((0.1 + 0.1 * tl, 0.2 + 0.2 * tl)),
        ObstacleKind::Flat => Err(TerrainError::FlatHasNoRange),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainProfile {
    pub obstacles: Vec<ObstacleSpec>,
    pub waypoints: Vec<Vec2>,
    pub track_length: f64,
    pub half_width: f64,
    pub terrain_level: u32,
    pub seed: u64,
}

impl TerrainProfile {
    /// Obstacle-free corridor with evenly spaced waypoints; used by tests and sanity runs.
    pub fn flat(config: &TerrainConfig) -> Self {
        let mut obstacles = Vec::with_capacity(GOALS_PER_TRACK);
        let mut waypoints = Vec::with_capacity(GOALS_PER_TRACK);
        let mut cursor = 0.0;
        for _ in 0..GOALS_PER_TRACK {
            cursor += config.spacing_min;
            obstacles.push(ObstacleSpec {
                kind: ObstacleKind::Flat,
                x_start: cursor,
                extent_forward: config.flat_length,
                extent_lateral: 2.0 * config.half_width,
                height: 0.0,
                lateral_center: 0.0,
            });
            cursor += config.flat_length;
            waypoints.push([cursor + config.waypoint_offset, 0.0]);
        }
        TerrainProfile {
            obstacles,
            waypoints,
            track_length: config.track_length,
            half_width: config.half_width,
            terrain_level: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, tl_max: u32) -> Result<(), TerrainError> {
        if self.waypoints.len() != GOALS_PER_TRACK || self.obstacles.len() != GOALS_PER_TRACK {
            return Err(TerrainError::InvalidConfig(format!(
                "profile must carry {GOALS_PER_TRACK} obstacles and waypoints"
            )));
        }
        if self.terrain_level > tl_max {
            return Err(TerrainError::LevelAboveMax { level: self.terrain_level as i64, max: tl_max });
        }
        for o in &self.obstacles {
            o.check()?;
        }
        let ordered = self.obstacles.windows(2).all(|w| w[0].x_end() <= w[1].x_start)
            && self.waypoints.windows(2).all(|w| w[0][0] < w[1][0]);
        if !ordered {
            return Err(TerrainError::InvalidConfig("obstacles overlap or waypoints unordered".into()));
        }
        Ok(())
    }

    /// Index of the obstacle slot paired with waypoint `goal`.
    pub fn obstacle_for_goal(&self, goal: usize) -> Option<&ObstacleSpec> {
        self.obstacles.get(goal)
    }
}

/// Draw a track. Pure in `(config, level, rng state)`.
pub fn generate_profile<R: Rng + ?Sized>(
    config: &TerrainConfig,
    level: i64,
    seed: u64,
    rng: &mut R,
) -> Result<TerrainProfile, TerrainError> {
    config.validate()?;
    if level < 0 {
        return Err(TerrainError::NegativeLevel(level));
    }
    if level > config.tl_max as i64 {
        return Err(TerrainError::LevelAboveMax { level, max: config.tl_max });
    }
    let weights = ObstacleKind::ALL.map(|k| config.mix.weight(k));
    let picker = WeightedIndex::new(weights).map_err(|e| TerrainError::InvalidConfig(format!("obstacle mix: {e}")))?;
    let full_width = 2.0 * config.half_width;

    let mut obstacles = Vec::with_capacity(GOALS_PER_TRACK);
    let mut waypoints = Vec::with_capacity(GOALS_PER_TRACK);
    let mut cursor = 0.0;
    for _ in 0..GOALS_PER_TRACK {
        let kind = ObstacleKind::ALL[picker.sample(rng)];
        cursor += uniform(rng, config.spacing_min, config.spacing_max);
        let spec = match kind {
            ObstacleKind::Gap => {
                let (lo, hi) = curriculum_range(kind, level)?;
                ObstacleSpec {
                    kind,
                    x_start: cursor,
                    extent_forward: uniform(rng, lo, hi),
                    extent_lateral: full_width,
                    height: uniform(rng, GAP_DEPTH.0, GAP_DEPTH.1),
                    lateral_center: 0.0,
                }
            }
            ObstacleKind::Hurdle => {
                let (lo, hi) = curriculum_range(kind, level)?;
                ObstacleSpec {
                    kind,
                    x_start: cursor,
                    extent_forward: uniform(rng, HURDLE_THICKNESS.0, HURDLE_THICKNESS.1),
                    extent_lateral: full_width,
                    height: uniform(rng, lo, hi),
                    lateral_center: 0.0,
                }
            }
            ObstacleKind::Wall => {
                let (lo, hi) = curriculum_range(kind, level)?;
                ObstacleSpec {
                    kind,
                    x_start: cursor,
                    extent_forward: uniform(rng, WALL_THICKNESS.0, WALL_THICKNESS.1),
                    extent_lateral: uniform(rng, lo, hi),
                    height: uniform(rng, WALL_HEIGHT.0, WALL_HEIGHT.1),
                    lateral_center: uniform(rng, -WALL_CENTER_SPREAD, WALL_CENTER_SPREAD),
                }
            }
            ObstacleKind::Flat => ObstacleSpec {
                kind,
                x_start: cursor,
                extent_forward: config.flat_length,
                extent_lateral: full_width,
                height: 0.0,
                lateral_center: 0.0,
            },
        };
        cursor = spec.x_end();
        // Walls hide their waypoint directly behind the wall center.
        let wy = if kind == ObstacleKind::Wall { spec.lateral_center } else { 0.0 };
        waypoints.push([cursor + config.waypoint_offset, wy]);
        obstacles.push(spec);
    }

    Ok(TerrainProfile {
        obstacles,
        waypoints,
        track_length: config.track_length,
        half_width: config.half_width,
        terrain_level: level as u32,
        seed,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Ground-truth terrain height at `(x, y)`. Zero on flat ground and off-track.
pub fn height_at(profile: &TerrainProfile, x: f64, y: f64) -> f64 {
    if y.abs() > profile.half_width {
        return 0.0;
    }
    profile.obstacles.iter().find(|o| o.kind != ObstacleKind::Flat && o.contains(x, y)).map_or(0.0, |o| o.height)
}

/// Highest terrain point under the open square footprint centered at `(x, y)`.
pub fn footprint_max_height(profile: &TerrainProfile, x: f64, y: f64, half: f64) -> f64 {
    let (x0, x1, y0, y1) = (x - half, x + half, y - half, y + half);
    let mut inside_gap = None;
    let mut max_solid = f64::NEG_INFINITY;
    for o in &profile.obstacles {
        if !o.overlaps(x0, x1, y0, y1) {
            continue;
        }
        match o.kind {
            ObstacleKind::Gap => {
                // A gap only lowers the support when it covers the whole footprint.
                let covers = o.x_start <= x0 && o.x_end() >= x1 && o.y_min() <= y0 && o.y_max() >= y1;
                if covers {
                    inside_gap = Some(o.height);
                }
            }
            ObstacleKind::Hurdle | ObstacleKind::Wall => max_solid = max_solid.max(o.height),
            ObstacleKind::Flat => {}
        }
    }
    let base = inside_gap.unwrap_or(0.0);
    base.max(max_solid)
}

/// Unit vector from `from` toward `to`; falls back to `heading` when the points coincide.
pub fn goal_direction(to: Vec2, from: Vec2, heading: f64) -> Vec2 {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    let n = dx.hypot(dy);
    if n < 1e-12 {
        [heading.cos(), heading.sin()]
    } else {
        [dx / n, dy / n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    macro_rules! assert_close {
        ($a:expr, $b:expr) => {
            assert!((($a) - ($b)).abs() < 1e-12, "{} != {}", $a, $b)
        };
    }

    fn profile_with(obstacles: Vec<ObstacleSpec>) -> TerrainProfile {
        TerrainProfile {
            waypoints: vec![[0.0, 0.0]; GOALS_PER_TRACK],
            obstacles,
            track_length: 40.0,
            half_width: 2.0,
            terrain_level: 0,
            seed: 0,
        }
    }

    #[test]
    fn curriculum_examples() {
        let (lo, hi) = curriculum_range(ObstacleKind::Gap, 1).unwrap();
        assert_close!(lo, 0.6);
        assert_close!(hi, 0.8);
        let (lo, hi) = curriculum_range(ObstacleKind::Hurdle, 1).unwrap();
        assert_close!(lo, 0.2);
        assert_close!(hi, 0.4);
        let (lo, hi) = curriculum_range(ObstacleKind::Gap, 0).unwrap();
        assert_close!(lo, 0.1);
        assert_close!(hi, 0.2);
        assert_eq!(curriculum_range(ObstacleKind::Wall, -1), Err(TerrainError::NegativeLevel(-1)));
        assert_eq!(curriculum_range(ObstacleKind::Flat, 0), Err(TerrainError::FlatHasNoRange));
    }

    #[test]
    fn height_examples() {
        let flat = TerrainProfile::flat(&TerrainConfig::default());
        for (x, y) in [(0.0, 0.0), (3.3, 1.0), (-5.0, 9.0)] {
            assert_eq!(height_at(&flat, x, y), 0.0);
        }
        let gap = ObstacleSpec {
            kind: ObstacleKind::Gap,
            x_start: 2.0,
            extent_forward: 0.7,
            extent_lateral: 4.0,
            height: -1.6,
            lateral_center: 0.0,
        };
        let hurdle = ObstacleSpec {
            kind: ObstacleKind::Hurdle,
            x_start: 5.0,
            extent_forward: 0.15,
            extent_lateral: 4.0,
            height: 0.3,
            lateral_center: 0.0,
        };
        let p = profile_with(vec![gap, hurdle]);
        assert_eq!(height_at(&p, 2.3, 0.0), -1.6);
        assert_eq!(height_at(&p, 5.1, 0.0), 0.3);
        assert_eq!(height_at(&p, 4.0, 0.0), 0.0);
    }

    #[test]
    fn footprint_support_bridges_narrow_gaps() {
        let gap = ObstacleSpec {
            kind: ObstacleKind::Gap,
            x_start: 2.0,
            extent_forward: 0.2,
            extent_lateral: 4.0,
            height: -1.6,
            lateral_center: 0.0,
        };
        let p = profile_with(vec![gap]);
        assert_eq!(footprint_max_height(&p, 2.1, 0.0, 0.15), 0.0);
        let wide = ObstacleSpec { extent_forward: 0.8, ..gap };
        let p = profile_with(vec![wide]);
        assert_eq!(footprint_max_height(&p, 2.4, 0.0, 0.15), -1.6);
        assert_eq!(footprint_max_height(&p, 2.1, 0.0, 0.15), 0.0);
    }

    #[test]
    fn goal_direction_examples() {
        assert_eq!(goal_direction([1.0, 0.0], [0.0, 0.0], 0.0), [1.0, 0.0]);
        assert_eq!(goal_direction([0.0, 2.0], [0.0, 0.0], 0.0), [0.0, 1.0]);
        let d = goal_direction([3.0, 4.0], [0.0, 0.0], 0.0);
        assert_close!(d[0], 0.6);
        assert_close!(d[1], 0.8);
        let h = 0.7_f64;
        assert_eq!(goal_direction([1.0, 1.0], [1.0, 1.0], h), [h.cos(), h.sin()]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = TerrainConfig::default();
        let a = generate_profile(&cfg, 0, 7, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_profile(&cfg, 0, 7, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        a.validate(cfg.tl_max).unwrap();
    }

    #[test]
    fn gaps_only_level_one_widths() {
        let cfg = TerrainConfig { mix: ObstacleMix::only(ObstacleKind::Gap), ..Default::default() };
        for seed in 0..20 {
            let p = generate_profile(&cfg, 1, seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for o in &p.obstacles {
                assert!(o.extent_forward >= 0.6 && o.extent_forward <= 0.8, "{}", o.extent_forward);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = TerrainConfig { spacing_min: 4.0, spacing_max: 6.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(TerrainError::InvalidConfig(_))));
        let cfg = TerrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(generate_profile(&cfg, 2, 0, &mut rng), Err(TerrainError::LevelAboveMax { level: 2, max: 1 }));
        assert_eq!(generate_profile(&cfg, -1, 0, &mut rng), Err(TerrainError::NegativeLevel(-1)));
    }

    #[test]
    fn wall_waypoint_sits_behind_wall_center() {
        let cfg = TerrainConfig { mix: ObstacleMix::only(ObstacleKind::Wall), ..Default::default() };
        let p = generate_profile(&cfg, 1, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (o, w) in p.obstacles.iter().zip(&p.waypoints) {
            assert_eq!(w[1], o.lateral_center);
            assert_close!(w[0], o.x_end() + cfg.waypoint_offset);
        }
    }
}
