//! Rollouts and their conversion into paired multi-view visual / IPT samples.
//!
//! A [`Sample`] is one traversed location: the terrain under it seen from up to
//! 20 earlier poses within 2 m, plus the spectrum of the IPT window recorded
//! there. The IPT feature vector is the one-sided PSD followed by the mean and
//! standard deviation of the raw series.

mod io;
pub mod psd;
mod rollout;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::par::{self, ExecMode};
use crate::rng::{derive_rng, rng_from_seed, tag};
use crate::worldsim::{RobotState, World, WorldError};

pub use io::{read_dataset, write_dataset, MANIFEST_FILE, SAMPLES_FILE};
pub use psd::{psd, Psd};
pub use rollout::{record_rollout, Policy, RolloutConfig, TimedState, Trajectory};

pub const MAX_VIEWS: usize = 20;
pub const VIEW_RADIUS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("parse error at {file} line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: RobotState,
    /// Descriptors of the same ground location from distinct earlier poses,
    /// most recent first.
    pub views: Vec<Vec<f64>>,
    /// PSD bins followed by `[mean, std]` of the raw IPT series.
    pub ipt_psd: Vec<f64>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub world_hash: String,
    pub visual_dim: usize,
    pub ipt_dim: usize,
    pub seed: u64,
    pub sample_count: usize,
    /// States without a qualifying earlier viewpoint.
    pub dropped_states: usize,
    /// SHA-256 of `samples.jsonl`.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

impl Dataset {
    /// Validate homogeneity and seal the manifest hash.
    pub fn new(
        samples: Vec<Sample>,
        world_hash: String,
        seed: u64,
        dropped_states: usize,
    ) -> Result<Self, DataError> {
        let visual_dim = samples
            .first()
            .and_then(|s| s.views.first())
            .map_or(0, Vec::len);
        let ipt_dim = samples.first().map_or(0, |s| s.ipt_psd.len());
        for (i, s) in samples.iter().enumerate() {
            if s.views.is_empty() || s.views.len() > MAX_VIEWS {
                return Err(DataError::Invalid(format!(
                    "sample {i} has {} views",
                    s.views.len()
                )));
            }
            if s.views.iter().any(|v| v.len() != visual_dim) || s.ipt_psd.len() != ipt_dim {
                return Err(DataError::Invalid(format!(
                    "sample {i} has inconsistent dimensions"
                )));
            }
            let finite = s
                .views
                .iter()
                .flatten()
                .chain(&s.ipt_psd)
                .all(|v| v.is_finite())
                && [s.state.x, s.state.y, s.state.theta]
                    .iter()
                    .all(|v| v.is_finite());
            if !finite {
                return Err(DataError::Invalid(format!(
                    "sample {i} has non-finite values"
                )));
            }
            if ipt_dim >= 2
                && s.ipt_psd[..ipt_dim - 2]
                    .iter()
                    .chain(&s.ipt_psd[ipt_dim - 1..])
                    .any(|&p| p < 0.0)
            {
                return Err(DataError::Invalid(format!(
                    "sample {i} has negative spectral power"
                )));
            }
        }
        let content_hash = hash_lines(&io::sample_lines(&samples)?);
        let manifest = Manifest {
            world_hash,
            visual_dim,
            ipt_dim,
            seed,
            sample_count: samples.len(),
            dropped_states,
            content_hash,
        };
        Ok(Self { samples, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sub-dataset with the given sample indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self, DataError> {
        let samples = idx.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(
            samples,
            self.manifest.world_hash.clone(),
            self.manifest.seed,
            0,
        )
    }

    /// Concatenate datasets recorded in the same feature spaces.
    pub fn concat(parts: &[Dataset], world_hash: String, seed: u64) -> Result<Self, DataError> {
        let samples = parts
            .iter()
            .flat_map(|d| d.samples.iter().cloned())
            .collect();
        let dropped = parts.iter().map(|d| d.manifest.dropped_states).sum();
        Self::new(samples, world_hash, seed, dropped)
    }

    /// Distinct labels in first-seen order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if let Some(l) = &s.label {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }
}

pub(crate) fn hash_lines(lines: &str) -> String {
    hex::encode(Sha256::digest(lines.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    pub max_views: usize,
    pub view_radius: f64,
    pub psd_window: usize,
    pub exec: ExecMode,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            max_views: MAX_VIEWS,
            view_radius: VIEW_RADIUS,
            psd_window: psd::DEFAULT_WINDOW,
            exec: ExecMode::Parallel,
        }
    }
}

/// IPT feature vector: PSD bins then `[mean, std]`.
pub fn ipt_features(
    series: &[f64],
    sample_rate: f64,
    window: usize,
) -> Result<Vec<f64>, DataError> {
    let mut out = psd(series, sample_rate, window)?.bins;
    let (mean, std) = psd::center_and_spread(series);
    out.push(mean);
    out.push(std);
    Ok(out)
}

/// Build samples from a recorded trajectory.
///
/// State `k` is observed from every earlier pose within `view_radius`
/// (most recent first, at most `max_views`). States with no such pose are
/// dropped and counted in the manifest.
pub fn extract_samples(
    traj: &Trajectory,
    world: &World,
    cfg: &ExtractConfig,
) -> Result<Dataset, DataError> {
    if traj.states.len() < 2 {
        return Err(DataError::Invalid(format!(
            "trajectory has {} states, need ≥ 2",
            traj.states.len()
        )));
    }
    if traj.ipt_log.len() != traj.states.len() {
        return Err(DataError::Invalid(
            "trajectory sensor log length mismatch".into(),
        ));
    }
    let master = traj.seed ^ world.config().rng_seed.rotate_left(17);
    let rate = world.config().ipt_sample_rate;
    let results: Vec<Result<Option<Sample>, DataError>> =
        par::map_range(cfg.exec, traj.states.len(), |k| {
            let here = traj.states[k].pose;
            let target = here.xy();
            let prior: Vec<&RobotState> = traj.states[..k]
                .iter()
                .rev()
                .map(|s| &s.pose)
                .filter(|p| p.distance_to(target) <= cfg.view_radius)
                .take(cfg.max_views)
                .collect();
            if prior.is_empty() {
                return Ok(None);
            }
            let mut rng = derive_rng(master, k as u64);
            let views = prior
                .iter()
                .map(|p| world.sense_visual(p, target, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let ipt_psd = ipt_features(&traj.ipt_log[k], rate, cfg.psd_window)?;
            let label = world
                .terrain_at(here.x, here.y)
                .ok()
                .and_then(|id| world.terrain(id))
                .map(|t| t.label.clone());
            Ok(Some(Sample {
                state: here,
                views,
                ipt_psd,
                label,
            }))
        });
    let mut samples = Vec::new();
    let mut dropped = 0;
    for r in results {
        match r? {
            Some(s) => samples.push(s),
            None => dropped += 1,
        }
    }
    Dataset::new(samples, world.content_hash(), traj.seed, dropped)
}

/// Seeded shuffle, then split at `⌈fraction·n⌉`.
pub fn split_dataset(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if dataset.is_empty() {
        return Err(DataError::Invalid("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "split fraction must be in (0,1), got {fraction}"
        )));
    }
    let (a, b) = split_indices(dataset.len(), fraction, seed);
    Ok((dataset.subset(&a)?, dataset.subset(&b)?))
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed ^ tag("split")));
    let cut = ((fraction * n as f64).ceil() as usize).min(n);
    let val = idx.split_off(cut);
    (idx, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{TerrainModel, WorldConfig};

    fn uniform_world(w: usize, h: usize, spread: f64) -> World {
        let terrains = (0..2)
            .map(|id| TerrainModel {
                id,
                label: format!("t{id}"),
                visual_prototype: vec![1.0 + id as f64, -0.5, 0.3 * id as f64, 2.0],
                visual_spread: spread,
                ipt_prototype: vec![0.2; 33],
                ipt_spread: 0.1,
                oracle_rank: id,
            })
            .collect();
        let grid = (0..w * h).map(|i| ((i % w) >= w / 2) as u32).collect();
        World::new(
            WorldConfig {
                width: w,
                height: h,
                grid,
                cell_size: 1.0,
                obstacles: vec![],
                rng_seed: 4,
                ipt_sample_rate: 32.0,
                ipt_window: 2.0,
                sensing_range: 2.5,
            },
            terrains,
        )
        .unwrap()
    }

    fn straight(n: usize, spacing: f64) -> Trajectory {
        let states = (0..n)
            .map(|i| TimedState {
                t: i as f64,
                pose: RobotState::new(0.5 + spacing * i as f64, 0.5, 0.0),
                v: spacing,
                omega: 0.0,
            })
            .collect();
        Trajectory {
            states,
            ipt_log: vec![vec![0.1, -0.1, 0.2, 0.0]; n],
            truncated: false,
            seed: 1,
        }
    }

    #[test]
    fn one_metre_apart_gives_one_view() {
        let w = uniform_world(4, 1, 0.0);
        let d = extract_samples(&straight(2, 1.0), &w, &ExtractConfig::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples[0].views.len(), 1);
        assert_eq!(d.manifest.dropped_states, 1);
    }

    #[test]
    fn views_capped_at_twenty_most_recent() {
        let w = uniform_world(4, 1, 0.0);
        // 31 poses 5 cm apart: the last one has 30 priors within 1.5 m
        let traj = straight(31, 0.05);
        let d = extract_samples(&traj, &w, &ExtractConfig::default()).unwrap();
        let last = d.samples.last().unwrap();
        assert_eq!(last.views.len(), 20);
        // most recent first: nearest viewpoint has the largest 1/(1+d) scale
        let target = traj.states[30].pose;
        let mut rng = crate::rng::rng_from_seed(0);
        for (i, v) in last.views.iter().enumerate() {
            let expected = w
                .sense_visual(&traj.states[29 - i].pose, target.xy(), &mut rng)
                .unwrap();
            for (a, b) in v.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_priors_drop_the_state() {
        let w = uniform_world(8, 1, 0.0);
        let d = extract_samples(&straight(3, 2.5), &w, &ExtractConfig::default()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.manifest.dropped_states, 3);
    }

    #[test]
    fn too_short_trajectory_rejected() {
        let w = uniform_world(4, 1, 0.0);
        assert!(extract_samples(&straight(1, 1.0), &w, &ExtractConfig::default()).is_err());
    }

    #[test]
    fn views_share_one_location_in_zero_spread_worlds() {
        let w = uniform_world(6, 1, 0.0);
        let traj = straight(50, 0.1);
        let d = extract_samples(&traj, &w, &ExtractConfig::default()).unwrap();
        for s in &d.samples {
            let id = w.terrain_at(s.state.x, s.state.y).unwrap();
            let proto = &w.terrain(id).unwrap().visual_prototype;
            // bearing 0 on a straight line: every view is a positive multiple of the prototype
            for v in &s.views {
                let ratio = v[0] / proto[0];
                assert!(ratio > 0.0);
                for (a, p) in v.iter().zip(proto) {
                    assert!((a - ratio * p).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn split_rules() {
        let (a, b) = split_indices(100, 0.75, 3);
        assert_eq!((a.len(), b.len()), (75, 25));
        let (a, b) = split_indices(3, 0.5, 3);
        assert_eq!((a.len(), b.len()), (2, 1));
        let (a2, b2) = split_indices(3, 0.5, 3);
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn split_errors() {
        let w = uniform_world(4, 1, 0.0);
        let d = extract_samples(&straight(5, 0.5), &w, &ExtractConfig::default()).unwrap();
        assert!(split_dataset(&d, 0.0, 1).is_err());
        assert!(split_dataset(&d, 1.0, 1).is_err());
        let (t, v) = split_dataset(&d, 0.75, 1).unwrap();
        assert_eq!(t.len() + v.len(), d.len());
        let empty = Dataset::new(vec![], "h".into(), 0, 0).unwrap();
        assert!(split_dataset(&empty, 0.5, 1).is_err());
    }
}
