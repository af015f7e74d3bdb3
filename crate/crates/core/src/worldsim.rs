//! Deterministic 2-D terrain world with unicycle kinematics and two sensor
//! models: a viewpoint-dependent visual descriptor and an
//! inertial-proprioceptive-tactile (IPT) time series.
//!
//! Grid cell `(col, row)` covers `[col·s, (col+1)·s) × [row·s, (row+1)·s)` and
//! is stored row-major. A coordinate that falls exactly on a cell boundary
//! belongs to the cell with the lower index.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("position ({x}, {y}) is outside the world")]
    OutOfWorld { x: f64, y: f64 },
    #[error("target at distance {distance:.3} m exceeds sensing range {range:.3} m")]
    NotVisible { distance: f64, range: f64 },
    #[error("invalid step: dt must be positive, got {0}")]
    InvalidStep(f64),
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("world io: {0}")]
    Io(String),
}

/// Generative description of one terrain type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainModel {
    pub id: u32,
    pub label: String,
    pub visual_prototype: Vec<f64>,
    pub visual_spread: f64,
    /// One-sided power spectrum the IPT signal is synthesized from.
    pub ipt_prototype: Vec<f64>,
    pub ipt_spread: f64,
    /// Ground-truth preference rank, 0 = most preferred. Evaluation only.
    pub oracle_rank: u32,
}

fn default_sensing_range() -> f64 {
    2.5
}

fn default_ipt_window() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Number of columns (x direction).
    pub width: usize,
    /// Number of rows (y direction).
    pub height: usize,
    /// Row-major terrain ids, `height × width`.
    pub grid: Vec<u32>,
    pub cell_size: f64,
    /// Blocked cells as `[col, row]`.
    #[serde(default)]
    pub obstacles: Vec<[usize; 2]>,
    pub rng_seed: u64,
    pub ipt_sample_rate: f64,
    #[serde(default = "default_ipt_window")]
    pub ipt_window: f64,
    #[serde(default = "default_sensing_range")]
    pub sensing_range: f64,
}

/// Pose in SE(2). `theta` is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }

    /// Map a point from this pose's frame into the world frame.
    pub fn transform_point(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [
            self.x + c * local[0] - s * local[1],
            self.y + s * local[0] + c * local[1],
        ]
    }

    /// Compose with a pose expressed in this pose's frame.
    pub fn compose(&self, local: &RobotState) -> RobotState {
        let [x, y] = self.transform_point([local.x, local.y]);
        RobotState::new(x, y, self.theta + local.theta)
    }
}

/// Wrap an angle into (−π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// Unicycle integration over one control interval.
pub fn step(state: &RobotState, v: f64, omega: f64, dt: f64) -> Result<RobotState, WorldError> {
    if !(dt > 0.0) {
        return Err(WorldError::InvalidStep(dt));
    }
    let (s, c) = state.theta.sin_cos();
    Ok(RobotState::new(
        state.x + v * c * dt,
        state.y + v * s * dt,
        state.theta + omega * dt,
    ))
}

/// A validated world: configuration plus its terrain library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldDoc", into = "WorldDoc")]
pub struct World {
    terrains: Vec<TerrainModel>,
    config: WorldConfig,
    blocked: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct WorldDoc {
    terrains: Vec<TerrainModel>,
    #[serde(flatten)]
    config: WorldConfig,
}

impl TryFrom<WorldDoc> for World {
    type Error = WorldError;
    fn try_from(doc: WorldDoc) -> Result<Self, Self::Error> {
        World::new(doc.config, doc.terrains)
    }
}

impl From<World> for WorldDoc {
    fn from(w: World) -> Self {
        WorldDoc {
            terrains: w.terrains,
            config: w.config,
        }
    }
}

impl World {
    pub fn new(config: WorldConfig, mut terrains: Vec<TerrainModel>) -> Result<Self, WorldError> {
        let bad = |m: String| Err(WorldError::Invalid(m));
        if config.width == 0 || config.height == 0 {
            return bad("grid must have at least one cell".into());
        }
        if config.grid.len() != config.width * config.height {
            return bad(format!(
                "grid has {} cells, expected {}×{}",
                config.grid.len(),
                config.height,
                config.width
            ));
        }
        if !(config.cell_size > 0.0) || !config.cell_size.is_finite() {
            return bad(format!(
                "cell_size must be positive, got {}",
                config.cell_size
            ));
        }
        if !(config.ipt_window > 0.0) {
            return bad(format!(
                "ipt_window must be positive, got {}",
                config.ipt_window
            ));
        }
        if !(config.ipt_sample_rate > 0.0) {
            return bad(format!(
                "ipt_sample_rate must be positive, got {}",
                config.ipt_sample_rate
            ));
        }
        if !(config.sensing_range > 0.0) {
            return bad(format!(
                "sensing_range must be positive, got {}",
                config.sensing_range
            ));
        }
        if terrains.is_empty() {
            return bad("no terrains".into());
        }
        terrains.sort_by_key(|t| t.id);
        let dv = terrains[0].visual_prototype.len();
        let di = terrains[0].ipt_prototype.len();
        if dv == 0 || di < 2 {
            return bad(
                "visual prototype must be non-empty and ipt prototype needs ≥ 2 bins".into(),
            );
        }
        for (i, t) in terrains.iter().enumerate() {
            if i > 0 && terrains[i - 1].id == t.id {
                return bad(format!("duplicate terrain id {}", t.id));
            }
            if t.visual_prototype.len() != dv || t.ipt_prototype.len() != di {
                return bad(format!(
                    "terrain {} has inconsistent prototype dimensions",
                    t.id
                ));
            }
            if !(t.visual_spread >= 0.0) || !(t.ipt_spread >= 0.0) {
                return bad(format!("terrain {} has a negative spread", t.id));
            }
            if !t
                .visual_prototype
                .iter()
                .chain(&t.ipt_prototype)
                .all(|v| v.is_finite())
            {
                return bad(format!("terrain {} has non-finite prototype values", t.id));
            }
            if t.ipt_prototype.iter().any(|&p| p < 0.0) {
                return bad(format!("terrain {} has negative spectral power", t.id));
            }
        }
        if let Some(id) = config
            .grid
            .iter()
            .find(|&&id| terrains.binary_search_by_key(&id, |t| t.id).is_err())
        {
            return bad(format!("grid references unknown terrain id {id}"));
        }
        let mut blocked = vec![false; config.grid.len()];
        for &[c, r] in &config.obstacles {
            if c >= config.width || r >= config.height {
                return bad(format!("obstacle cell [{c}, {r}] outside grid"));
            }
            blocked[r * config.width + c] = true;
        }
        Ok(Self {
            terrains,
            config,
            blocked,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn terrains(&self) -> &[TerrainModel] {
        &self.terrains
    }

    pub fn terrain(&self, id: u32) -> Option<&TerrainModel> {
        self.terrains
            .binary_search_by_key(&id, |t| t.id)
            .ok()
            .map(|i| &self.terrains[i])
    }

    pub fn visual_dim(&self) -> usize {
        self.terrains[0].visual_prototype.len()
    }

    /// Number of one-sided spectral bins of the IPT prototypes.
    pub fn ipt_bins(&self) -> usize {
        self.terrains[0].ipt_prototype.len()
    }

    /// Length of the block the IPT signal is synthesized in.
    pub fn ipt_block_len(&self) -> usize {
        2 * (self.ipt_bins() - 1)
    }

    /// Samples per IPT window.
    pub fn ipt_series_len(&self) -> usize {
        ((self.config.ipt_window * self.config.ipt_sample_rate).round() as usize).max(1)
    }

    pub fn width_m(&self) -> f64 {
        self.config.width as f64 * self.config.cell_size
    }

    pub fn height_m(&self) -> f64 {
        self.config.height as f64 * self.config.cell_size
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    /// Grid cell `(col, row)` containing a point, with the lower-index tie rule.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = axis_index(x, self.config.cell_size, self.config.width)?;
        let r = axis_index(y, self.config.cell_size, self.config.height)?;
        Some((c, r))
    }

    pub fn cell_terrain(&self, col: usize, row: usize) -> u32 {
        self.config.grid[row * self.config.width + col]
    }

    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        let s = self.config.cell_size;
        [(col as f64 + 0.5) * s, (row as f64 + 0.5) * s]
    }

    pub fn is_blocked_cell(&self, col: usize, row: usize) -> bool {
        self.blocked[row * self.config.width + col]
    }

    /// True when the point is outside the world or inside an obstacle cell.
    pub fn collides(&self, x: f64, y: f64) -> bool {
        match self.cell_of(x, y) {
            Some((c, r)) => self.is_blocked_cell(c, r),
            None => true,
        }
    }

    pub fn terrain_at(&self, x: f64, y: f64) -> Result<u32, WorldError> {
        let (c, r) = self.cell_of(x, y).ok_or(WorldError::OutOfWorld { x, y })?;
        Ok(self.cell_terrain(c, r))
    }

    /// Oracle rank of the terrain under a point.
    pub fn rank_at(&self, x: f64, y: f64) -> Result<u32, WorldError> {
        let id = self.terrain_at(x, y)?;
        Ok(self.terrain(id).map_or(u32::MAX, |t| t.oracle_rank))
    }

    /// Visual descriptor of the ground at `target` as seen from `pose`.
    ///
    /// The prototype of the target terrain is rotated block-wise (coordinate
    /// pairs) by the bearing of the target in the robot frame, scaled by
    /// `1/(1+d)` with `d` the distance to the target, and perturbed by
    /// isotropic Gaussian noise of the terrain's `visual_spread`.
    pub fn sense_visual(
        &self,
        pose: &RobotState,
        target: [f64; 2],
        rng: &mut Rng,
    ) -> Result<Vec<f64>, WorldError> {
        let id = self.terrain_at(target[0], target[1])?;
        let terrain = self.terrain(id).expect("validated grid");
        let dx = target[0] - pose.x;
        let dy = target[1] - pose.y;
        let distance = dx.hypot(dy);
        if distance > self.config.sensing_range {
            return Err(WorldError::NotVisible {
                distance,
                range: self.config.sensing_range,
            });
        }
        let bearing = if distance < 1e-12 {
            0.0
        } else {
            normalize_angle(dy.atan2(dx) - pose.theta)
        };
        let mut out = viewpoint_transform(&terrain.visual_prototype, distance, bearing);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += terrain.visual_spread * z;
        }
        Ok(out)
    }

    /// One IPT window recorded while the robot is at `state`.
    ///
    /// The series is built block-wise by inverse DFT: bin `k` gets magnitude
    /// `sqrt(W·P_k·m_k)` with a uniform random phase, where `P` is the
    /// terrain's prototype spectrum and `m_k` a mean-one log-normal factor of
    /// log-std `ipt_spread`. The DC and Nyquist bins get a random sign. The
    /// periodogram `|X_k|²/W` of each block is therefore `P_k·m_k`.
    pub fn sense_ipt(&self, state: &RobotState, rng: &mut Rng) -> Result<Vec<f64>, WorldError> {
        let id = self.terrain_at(state.x, state.y)?;
        let terrain = self.terrain(id).expect("validated grid");
        let n = self.ipt_series_len();
        let w = self.ipt_block_len();
        let table = TrigTable::new(w);
        let mut out = Vec::with_capacity(n + w);
        while out.len() < n {
            synthesize_block(
                &terrain.ipt_prototype,
                terrain.ipt_spread,
                &table,
                rng,
                &mut out,
            );
        }
        out.truncate(n);
        Ok(out)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("world serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        serde_json::from_str(text).map_err(|e| WorldError::Invalid(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| WorldError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorldError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn axis_index(v: f64, cell: f64, n: usize) -> Option<usize> {
    if !v.is_finite() || v < 0.0 || v > n as f64 * cell {
        return None;
    }
    let q = v / cell;
    let mut i = q.floor() as usize;
    if q == q.floor() && i > 0 {
        i -= 1;
    }
    Some(i.min(n - 1))
}

/// Deterministic part of the visual sensor model.
pub fn viewpoint_transform(prototype: &[f64], distance: f64, bearing: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 + distance);
    let (s, c) = bearing.sin_cos();
    let mut out = prototype.to_vec();
    for pair in out.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

struct TrigTable {
    w: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl TrigTable {
    fn new(w: usize) -> Self {
        let (cos, sin) = (0..w)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / w as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Self { w, cos, sin }
    }
}

fn synthesize_block(
    proto: &[f64],
    spread: f64,
    table: &TrigTable,
    rng: &mut Rng,
    out: &mut Vec<f64>,
) {
    let w = table.w;
    let half = w / 2;
    let wf = w as f64;
    // (re, im) of X_k for k = 0..=W/2
    let spectrum: Vec<(f64, f64)> = proto
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let z: f64 = StandardNormal.sample(rng);
            let m = (spread * z - 0.5 * spread * spread).exp();
            let mag = (wf * p * m).sqrt();
            if k == 0 || k == half {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (sign * mag, 0.0)
            } else {
                let phi = rng.random_range(0.0..2.0 * PI);
                (mag * phi.cos(), mag * phi.sin())
            }
        })
        .collect();
    for n in 0..w {
        let mut acc = spectrum[0].0;
        acc += spectrum[half].0 * if n % 2 == 0 { 1.0 } else { -1.0 };
        for (k, &(re, im)) in spectrum.iter().enumerate().take(half).skip(1) {
            let j = (k * n) % w;
            // Re[X_k e^{i2πkn/W}] doubled for the conjugate bin W−k
            acc += 2.0 * (re * table.cos[j] - im * table.sin[j]);
        }
        out.push(acc / wf);
    }
}
