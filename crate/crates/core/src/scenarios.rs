//! Standard synthetic worlds, data collection helpers and the glue that
//! turns trained models into planner utility models.
//!
//! All worlds draw from one five-terrain library. Visual prototypes are six
//! coordinate pairs whose norms form a terrain-specific profile: a strong
//! pair for the terrain's own slot and weak pairs elsewhere. Pair norms
//! survive the viewpoint rotation, and the profile shape survives the
//! distance scaling, so terrains stay separable from any viewpoint. IPT
//! prototypes are Gaussian bumps at terrain-specific frequency bins.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::datapipe::{
    extract_samples, record_rollout, split_dataset, DataError, Dataset, ExtractConfig, Policy,
    RolloutConfig,
};
use crate::evalkit::{BenchmarkConfig, TerrainRanks};
use crate::linalg::{sq_dist, Matrix};
use crate::par::ExecMode;
use crate::planner::{EpisodeConfig, PlanError, UtilityModel};
use crate::preference::{
    silhouette_select_k, train_utility, Clustering, PreferenceRanking, UtilityConfig, UtilityHead,
};
use crate::rng::{derive_rng, derive_seed, tag};
use crate::sterling::{train_sterling, Checkpoint, SterlingConfig};
use crate::worldsim::{RobotState, TerrainModel, World, WorldConfig, WorldError};

pub const VISUAL_PAIRS: usize = 6;
pub const IPT_BINS: usize = 33;
pub const IPT_SAMPLE_RATE: f64 = 128.0;
pub const VISUAL_SPREAD: f64 = 0.1;
pub const IPT_SPREAD: f64 = 0.3;
/// Library labels in id order; the id doubles as the oracle rank.
pub const LIBRARY: [&str; 5] = ["cement", "pebble", "grass", "mulch", "bush"];
pub const CEMENT: u32 = 0;
pub const PEBBLE: u32 = 1;
pub const GRASS: u32 = 2;
pub const MULCH: u32 = 3;
pub const BUSH: u32 = 4;
pub const NOVEL: u32 = 5;
pub const NOVEL_LABEL: &str = "novel";
/// Half-width of the uniform jitter applied to benchmark start positions.
pub const START_JITTER: f64 = 0.3;
/// Planner trade-off used by the standard navigation tasks.
pub const TASK_ALPHA: f64 = 0.2;
/// Cluster counts tried when grouping terrain embeddings.
pub const CLUSTER_K_RANGE: std::ops::RangeInclusive<usize> = 2..=8;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("could not collect {wanted} samples, got {got}")]
    TooFewSamples { wanted: usize, got: usize },
    #[error("{0}")]
    Model(String),
}

fn pair_angle(j: usize) -> f64 {
    0.9 * j as f64 + 0.3
}

/// Visual prototype with the given pair norms.
pub fn visual_from_profile(norms: &[f64]) -> Vec<f64> {
    norms
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| {
            let (s, c) = pair_angle(j).sin_cos();
            [n * c, n * s]
        })
        .collect()
}

pub fn library_profile(id: u32) -> Vec<f64> {
    (0..VISUAL_PAIRS)
        .map(|j| if j == id as usize { 3.0 } else { 0.5 })
        .collect()
}

pub fn library_ipt(id: u32) -> Vec<f64> {
    let centre = 3.0 + 6.0 * id as f64;
    (0..IPT_BINS)
        .map(|k| 0.05 + 2.0 * (-(k as f64 - centre).powi(2) / 8.0).exp())
        .collect()
}

pub fn library_terrain(id: u32) -> TerrainModel {
    TerrainModel {
        id,
        label: LIBRARY[id as usize].to_string(),
        visual_prototype: visual_from_profile(&library_profile(id)),
        visual_spread: VISUAL_SPREAD,
        ipt_prototype: library_ipt(id),
        ipt_spread: IPT_SPREAD,
        oracle_rank: id,
    }
}

pub fn terrain_library() -> Vec<TerrainModel> {
    (0..LIBRARY.len() as u32).map(library_terrain).collect()
}

/// Feels exactly like cement underfoot but looks like none of the library
/// terrains: its strong pair sits in the one visual slot the library leaves
/// free.
pub fn novel_terrain() -> TerrainModel {
    let profile: Vec<f64> = (0..VISUAL_PAIRS)
        .map(|j| if j == NOVEL as usize { 3.0 } else { 0.5 })
        .collect();
    TerrainModel {
        id: NOVEL,
        label: NOVEL_LABEL.to_string(),
        visual_prototype: visual_from_profile(&profile),
        visual_spread: VISUAL_SPREAD,
        ipt_prototype: library_ipt(CEMENT),
        ipt_spread: IPT_SPREAD,
        oracle_rank: 0,
    }
}

fn world_config(width: usize, height: usize, grid: Vec<u32>, seed: u64) -> WorldConfig {
    WorldConfig {
        width,
        height,
        grid,
        cell_size: 1.0,
        obstacles: Vec::new(),
        rng_seed: seed,
        ipt_sample_rate: IPT_SAMPLE_RATE,
        ipt_window: 2.0,
        sensing_range: 2.5,
    }
}

fn grid_from(width: usize, height: usize, f: impl Fn(usize, usize) -> u32) -> Vec<u32> {
    (0..width * height)
        .map(|i| f(i % width, i / width))
        .collect()
}

/// 20 m × 20 m patchwork of 4 m squares covering all five terrains.
pub fn separable_world(seed: u64) -> Result<World, ScenarioError> {
    let grid = grid_from(20, 20, |c, r| ((r / 4 + 2 * (c / 4)) % 5) as u32);
    Ok(World::new(
        world_config(20, 20, grid, seed),
        terrain_library(),
    )?)
}

/// A world plus the navigation task set in it.
#[derive(Debug, Clone)]
pub struct Task {
    pub world: World,
    pub start: RobotState,
    pub goal: [f64; 2],
    /// Reference trajectory demonstrating the preferred route.
    pub reference: Vec<[f64; 2]>,
}

/// 20 m × 10 m corridor world.
///
/// Cement pads at both ends (x 0–4 and 16–20, y 3–7) are separated by
/// bush, so the straight line from start to goal crosses the least
/// preferred terrain. A cement lane runs along the top (y 7–10) and a grass
/// lane along the bottom (y 0–3).
pub fn corridor_world(seed: u64) -> Result<World, ScenarioError> {
    let grid = grid_from(20, 10, |c, r| match r {
        0..=2 => GRASS,
        3..=6 if (4..16).contains(&c) => BUSH,
        _ => CEMENT,
    });
    let terrains = [CEMENT, GRASS, BUSH]
        .into_iter()
        .map(library_terrain)
        .collect();
    Ok(World::new(world_config(20, 10, grid, seed), terrains)?)
}

pub const CORRIDOR_START: [f64; 2] = [2.0, 6.5];
pub const CORRIDOR_GOAL: [f64; 2] = [18.0, 6.5];
pub const NOVEL_START: [f64; 2] = [2.0, 5.0];
pub const NOVEL_GOAL: [f64; 2] = [18.0, 5.0];

/// Demonstration through the cement lane.
pub fn corridor_reference_cement() -> Vec<[f64; 2]> {
    vec![CORRIDOR_START, [2.0, 8.5], [18.0, 8.5], CORRIDOR_GOAL]
}

/// Demonstration through the grass lane.
pub fn corridor_reference_grass() -> Vec<[f64; 2]> {
    vec![CORRIDOR_START, [2.0, 1.5], [18.0, 1.5], CORRIDOR_GOAL]
}

pub fn corridor_task(seed: u64) -> Result<Task, ScenarioError> {
    Ok(Task {
        world: corridor_world(seed)?,
        start: RobotState::new(CORRIDOR_START[0], CORRIDOR_START[1], 0.0),
        goal: CORRIDOR_GOAL,
        reference: corridor_reference_cement(),
    })
}

/// Corridor whose direct route is a 2 m band of the novel terrain between
/// cement pads, with grass on both sides.
pub fn novel_corridor_world(seed: u64) -> Result<World, ScenarioError> {
    let grid = grid_from(20, 10, |c, r| {
        let pad = !(4..16).contains(&c) && (3..7).contains(&r);
        if pad {
            CEMENT
        } else if (4..6).contains(&r) {
            NOVEL
        } else {
            GRASS
        }
    });
    let mut terrains: Vec<TerrainModel> = [CEMENT, GRASS, BUSH]
        .into_iter()
        .map(library_terrain)
        .collect();
    terrains.push(novel_terrain());
    Ok(World::new(world_config(20, 10, grid, seed), terrains)?)
}

pub fn novel_corridor_task(seed: u64) -> Result<Task, ScenarioError> {
    Ok(Task {
        world: novel_corridor_world(seed)?,
        start: RobotState::new(NOVEL_START[0], NOVEL_START[1], 0.0),
        goal: NOVEL_GOAL,
        reference: vec![NOVEL_START, NOVEL_GOAL],
    })
}

/// Uniform free pose at least 1 m from the border, with uniform heading.
pub fn random_start(world: &World, rng: &mut crate::rng::Rng) -> Result<RobotState, ScenarioError> {
    use rand::Rng as _;
    let (w, h) = (world.width_m(), world.height_m());
    if w <= 2.0 || h <= 2.0 {
        return Err(ScenarioError::Model(
            "world too small for a start pose".into(),
        ));
    }
    for _ in 0..10_000 {
        let (x, y) = (
            rng.random_range(1.0..w - 1.0),
            rng.random_range(1.0..h - 1.0),
        );
        if !world.collides(x, y) {
            return Ok(RobotState::new(
                x,
                y,
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            ));
        }
    }
    Err(ScenarioError::Model("no free start pose found".into()))
}

/// Random-walk rollouts from seeded starts until `n` samples are gathered;
/// the result holds exactly `n` samples.
pub fn random_walk_dataset(
    world: &World,
    n: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Dataset, ScenarioError> {
    let policy = Policy::random_walk();
    let extract = ExtractConfig {
        exec,
        ..ExtractConfig::default()
    };
    let mut parts: Vec<Dataset> = Vec::new();
    let mut have = 0;
    for round in 0..200u64 {
        if have >= n {
            break;
        }
        let start = random_start(world, &mut derive_rng(seed, tag("walk-start") ^ round))?;
        let cfg = RolloutConfig {
            start,
            duration: 60.0,
            dt: 0.1,
        };
        let traj = record_rollout(world, &policy, &cfg, derive_seed(seed, round))?;
        if traj.states.len() < 2 {
            continue;
        }
        let d = extract_samples(&traj, world, &extract)?;
        have += d.len();
        parts.push(d);
    }
    if have < n {
        return Err(ScenarioError::TooFewSamples {
            wanted: n,
            got: have,
        });
    }
    let all = Dataset::concat(&parts, world.content_hash(), seed)?;
    let idx: Vec<usize> = (0..n).collect();
    Ok(all.subset(&idx)?)
}

/// Drive through waypoints at 0.6 m/s, stopping on arrival, and keep the
/// samples recorded on `terrain`.
pub fn waypoint_dataset(
    world: &World,
    waypoints: Vec<[f64; 2]>,
    start: RobotState,
    terrain: Option<u32>,
    seed: u64,
    exec: ExecMode,
) -> Result<Dataset, ScenarioError> {
    const SPEED: f64 = 0.6;
    let length = crate::evalkit::path_length(&[vec![start.xy()], waypoints.clone()].concat());
    let duration = length / SPEED + 2.0;
    let policy = Policy::WaypointFollow {
        waypoints,
        v: SPEED,
        gain: 2.0,
        tolerance: 0.3,
    };
    let traj = record_rollout(
        world,
        &policy,
        &RolloutConfig {
            start,
            duration,
            dt: 0.1,
        },
        seed,
    )?;
    let d = extract_samples(
        &traj,
        world,
        &ExtractConfig {
            exec,
            ..ExtractConfig::default()
        },
    )?;
    let keep: Vec<usize> = (0..d.len())
        .filter(|&i| {
            terrain.is_none_or(|t| {
                world
                    .terrain_at(d.samples[i].state.x, d.samples[i].state.y)
                    .ok()
                    == Some(t)
            })
        })
        .collect();
    Ok(d.subset(&keep)?)
}

/// Deployment data for adaptation: `n` random-walk samples in `world`,
/// keeping those that `flag` marks.
pub fn flagged_walk_dataset(
    world: &World,
    n: usize,
    seed: u64,
    exec: ExecMode,
    flag: impl Fn(&crate::datapipe::Sample) -> bool,
) -> Result<Dataset, ScenarioError> {
    let d = random_walk_dataset(world, n, seed, exec)?;
    let keep: Vec<usize> = (0..d.len()).filter(|&i| flag(&d.samples[i])).collect();
    Ok(d.subset(&keep)?)
}

/// Label-to-rank map from a world's ground truth.
pub fn oracle_label_ranks(world: &World) -> BTreeMap<String, u32> {
    world
        .terrains()
        .iter()
        .map(|t| (t.label.clone(), t.oracle_rank))
        .collect()
}

/// Operator ranking over labels: labels sharing a rank are tied.
pub fn label_ranking(label_ranks: &BTreeMap<String, u32>) -> PreferenceRanking<String> {
    let mut by_rank: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for (l, &r) in label_ranks {
        by_rank.entry(r).or_default().push(l.clone());
    }
    PreferenceRanking::new(by_rank.into_values().collect())
}

/// Terrain ranks for evaluation from a label-to-rank map.
pub fn ranks_from_labels(world: &World, label_ranks: &BTreeMap<String, u32>) -> TerrainRanks {
    TerrainRanks(
        world
            .terrains()
            .iter()
            .filter_map(|t| label_ranks.get(&t.label).map(|&r| (t.id, r)))
            .collect(),
    )
}

/// Simulated operator: each cluster takes the label-rank of its majority
/// label (ties to the smaller label); clusters with equal ranks are tied.
pub fn simulate_operator(
    clustering: &Clustering,
    labels: &[Option<String>],
    label_ranks: &BTreeMap<String, u32>,
) -> PreferenceRanking<usize> {
    let mut by_rank: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (c, members) in clustering.members().into_iter().enumerate() {
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &members {
            if let Some(l) = &labels[i] {
                *votes.entry(l.as_str()).or_default() += 1;
            }
        }
        let majority = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, _)| *l);
        let rank = majority
            .and_then(|l| label_ranks.get(l).copied())
            .unwrap_or(u32::MAX);
        by_rank.entry(rank).or_default().push(c);
    }
    PreferenceRanking::new(by_rank.into_values().collect())
}

/// Group rows of `embeddings` by cluster id.
pub fn cluster_embeddings(embeddings: &Matrix, clustering: &Clustering) -> BTreeMap<usize, Matrix> {
    clustering
        .members()
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(c, m)| (c, embeddings.select_rows(&m)))
        .collect()
}

/// STERLING visual encoder followed by a utility head.
#[derive(Debug, Clone)]
pub struct SterlingUtility<'a> {
    pub checkpoint: &'a Checkpoint,
    pub head: &'a UtilityHead,
}

impl UtilityModel for SterlingUtility<'_> {
    fn utilities(&self, descriptors: &Matrix) -> Result<Vec<f64>, PlanError> {
        let z = self
            .checkpoint
            .encode_visual_batch(descriptors)
            .map_err(|e| PlanError::Utility(e.to_string()))?;
        self.head
            .utilities(&z)
            .map_err(|e| PlanError::Utility(e.to_string()))
    }
}

/// Ground-truth scorer: recognises the terrain from the shape of the pair
/// norms and returns a utility from its rank. Used to check planner and
/// world geometry independently of any learning.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    profiles: Vec<(Vec<f64>, f64)>,
}

impl OracleScorer {
    /// Utility `scale · (worst − rank)` for each terrain of the world.
    pub fn new(world: &World, ranks: &TerrainRanks, scale: f64) -> Self {
        let worst = ranks.0.values().copied().max().unwrap_or(0);
        let profiles = world
            .terrains()
            .iter()
            .filter_map(|t| {
                let r = ranks.rank(t.id)?;
                Some((
                    unit_profile(&t.visual_prototype),
                    scale * (worst - r) as f64,
                ))
            })
            .collect();
        Self { profiles }
    }
}

fn unit_profile(descriptor: &[f64]) -> Vec<f64> {
    let norms: Vec<f64> = descriptor
        .chunks(2)
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let total = norms.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
    norms.into_iter().map(|n| n / total).collect()
}

impl UtilityModel for OracleScorer {
    fn utilities(&self, descriptors: &Matrix) -> Result<Vec<f64>, PlanError> {
        Ok((0..descriptors.rows)
            .map(|r| {
                let p = unit_profile(descriptors.row(r));
                self.profiles
                    .iter()
                    .min_by(|a, b| sq_dist(&a.0, &p).total_cmp(&sq_dist(&b.0, &p)))
                    .map_or(0.0, |x| x.1)
            })
            .collect())
    }
}

/// Planner settings used by the standard tasks.
pub fn task_episode_config(task: &Task, alpha: f64) -> EpisodeConfig {
    EpisodeConfig::new(task.goal, alpha)
}

impl Task {
    /// Seeded benchmark over this task with jittered starts, judged against
    /// the task's reference under `ranks`.
    pub fn benchmark(
        &self,
        method: &str,
        alpha: f64,
        ranks: TerrainRanks,
        trials: usize,
        seed: u64,
    ) -> BenchmarkConfig {
        BenchmarkConfig {
            method: method.to_string(),
            episode: task_episode_config(self, alpha),
            start: self.start,
            start_jitter: START_JITTER,
            trials,
            seed,
            reference: self.reference.clone(),
            ranks,
        }
    }
}

/// Everything the STERLING route produces before the operator ranks
/// clusters.
#[derive(Debug, Clone)]
pub struct SterlingRun {
    pub checkpoint: Checkpoint,
    /// Visual embeddings of the whole dataset, one row per sample.
    pub embeddings: Matrix,
    pub labels: Vec<Option<String>>,
    pub clustering: Clustering,
}

/// Train STERLING on `dataset` (80/20 split) and cluster the visual
/// embeddings of every sample.
pub fn run_sterling(
    dataset: &Dataset,
    cfg: &SterlingConfig,
    exec: ExecMode,
) -> Result<SterlingRun, ScenarioError> {
    let (train, val) = split_dataset(dataset, 0.8, cfg.seed)?;
    let checkpoint =
        train_sterling(&train, &val, cfg).map_err(|e| ScenarioError::Model(e.to_string()))?;
    let embeddings = checkpoint
        .embed_dataset(dataset)
        .map_err(|e| ScenarioError::Model(e.to_string()))?;
    let hi = (*CLUSTER_K_RANGE.end()).min(embeddings.rows.saturating_sub(1));
    let clustering = silhouette_select_k(
        &embeddings,
        *CLUSTER_K_RANGE.start()..=hi,
        derive_seed(cfg.seed, tag("cluster")),
        exec,
    )
    .map_err(|e| ScenarioError::Model(e.to_string()))?;
    let labels = dataset.samples.iter().map(|s| s.label.clone()).collect();
    Ok(SterlingRun {
        checkpoint,
        embeddings,
        labels,
        clustering,
    })
}

/// Train on 80% of `dataset` and score k-means on the visual embeddings of
/// the held-out 20% against their terrain labels.
pub fn heldout_accuracy(
    dataset: &Dataset,
    cfg: &SterlingConfig,
) -> Result<(f64, Checkpoint), ScenarioError> {
    let (train, val) = split_dataset(dataset, 0.8, cfg.seed)?;
    let checkpoint =
        train_sterling(&train, &val, cfg).map_err(|e| ScenarioError::Model(e.to_string()))?;
    let z = checkpoint
        .embed_dataset(&val)
        .map_err(|e| ScenarioError::Model(e.to_string()))?;
    let labels: Vec<String> = val
        .samples
        .iter()
        .map(|s| s.label.clone().unwrap_or_default())
        .collect();
    let acc =
        crate::evalkit::clustering_accuracy(&z, &labels, derive_seed(cfg.seed, tag("ablation")))
            .map_err(|e| ScenarioError::Model(e.to_string()))?;
    Ok((acc, checkpoint))
}

impl SterlingRun {
    /// Have the simulated operator rank the clusters under `label_ranks` and
    /// fit a utility head to that ranking. The encoders are left untouched.
    pub fn fit_utility(
        &self,
        label_ranks: &BTreeMap<String, u32>,
        cfg: &UtilityConfig,
    ) -> Result<UtilityHead, ScenarioError> {
        let ranking = simulate_operator(&self.clustering, &self.labels, label_ranks);
        let groups = cluster_embeddings(&self.embeddings, &self.clustering);
        train_utility(&groups, &ranking, cfg).map_err(|e| ScenarioError::Model(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::run_episode;

    #[test]
    fn library_shapes() {
        let lib = terrain_library();
        assert_eq!(lib.len(), 5);
        assert!(lib
            .iter()
            .all(|t| t.visual_prototype.len() == 2 * VISUAL_PAIRS
                && t.ipt_prototype.len() == IPT_BINS));
        let n = novel_terrain();
        assert_eq!(n.ipt_prototype, lib[CEMENT as usize].ipt_prototype);
        let d = |a: &[f64], b: &[f64]| sq_dist(a, b).sqrt();
        let spacing = d(&lib[0].visual_prototype, &lib[1].visual_prototype);
        for t in &lib {
            assert!((d(&n.visual_prototype, &t.visual_prototype) - spacing).abs() < 1e-12);
        }
    }

    #[test]
    fn corridor_layout() {
        let w = corridor_world(1).unwrap();
        assert_eq!(
            w.terrain_at(CORRIDOR_START[0], CORRIDOR_START[1]).unwrap(),
            CEMENT
        );
        assert_eq!(w.terrain_at(10.0, 5.0).unwrap(), BUSH);
        assert_eq!(w.terrain_at(10.0, 8.5).unwrap(), CEMENT);
        assert_eq!(w.terrain_at(10.0, 1.5).unwrap(), GRASS);
        let nw = novel_corridor_world(1).unwrap();
        assert_eq!(nw.terrain_at(10.0, 5.0).unwrap(), NOVEL);
        assert_eq!(nw.terrain_at(10.0, 3.5).unwrap(), GRASS);
        assert_eq!(nw.terrain_at(18.0, 5.0).unwrap(), CEMENT);
    }

    #[test]
    fn oracle_scorer_recognises_terrain_from_any_view() {
        let w = corridor_world(1).unwrap();
        let s = OracleScorer::new(&w, &TerrainRanks::oracle(&w), 1.0);
        let mut rng = crate::rng::rng_from_seed(3);
        let pose = RobotState::new(9.0, 8.0, 0.7);
        for (target, expect) in [([10.0, 8.5], 4.0), ([10.0, 6.5], 0.0), ([9.0, 9.5], 4.0)] {
            let v = w.sense_visual(&pose, target, &mut rng).unwrap();
            assert_eq!(s.utilities(&Matrix::from_rows(&[v])).unwrap(), vec![expect]);
        }
    }

    #[test]
    fn operator_majority_and_ties() {
        let c = Clustering {
            k: 3,
            centroids: Matrix::zeros(3, 1),
            assignment: vec![0, 0, 1, 1, 2],
            inertia: 0.0,
            mean_silhouette: 0.0,
            low_confidence: false,
        };
        let labels: Vec<Option<String>> = ["bush", "bush", "cement", "grass", "grass"]
            .iter()
            .map(|s| Some(s.to_string()))
            .collect();
        let strict = BTreeMap::from([
            ("cement".to_string(), 0),
            ("grass".to_string(), 2),
            ("bush".to_string(), 4),
        ]);
        // cluster 1 is split cement/grass: tie goes to the smaller label
        assert_eq!(
            simulate_operator(&c, &labels, &strict).rank_groups,
            vec![vec![1], vec![2], vec![0]]
        );
        let tie = BTreeMap::from([
            ("cement".to_string(), 0),
            ("grass".to_string(), 0),
            ("bush".to_string(), 4),
        ]);
        assert_eq!(
            simulate_operator(&c, &labels, &tie).rank_groups,
            vec![vec![1, 2], vec![0]]
        );
    }

    #[test]
    fn oracle_planner_follows_the_cement_lane() {
        let task = corridor_task(1).unwrap();
        let ranks = TerrainRanks::oracle(&task.world);
        let scorer = OracleScorer::new(&task.world, &ranks, 1.0);
        let cfg = task_episode_config(&task, TASK_ALPHA);
        let e = run_episode(&task.world, &scorer, &cfg, task.start, 1).unwrap();
        let ok = crate::evalkit::alignment_success(
            &e.points(),
            e.reached_goal(),
            &task.reference,
            &task.world,
            &ranks,
        )
        .unwrap();
        assert!(
            ok,
            "{:?} after {} steps, end {:?}",
            e.outcome,
            e.steps,
            e.points().last()
        );
    }

    #[test]
    fn random_walk_collects_exact_count() {
        let w = separable_world(2).unwrap();
        let d = random_walk_dataset(&w, 300, 5, ExecMode::Parallel).unwrap();
        assert_eq!(d.len(), 300);
        assert!(d.labels().len() >= 3);
    }
}
