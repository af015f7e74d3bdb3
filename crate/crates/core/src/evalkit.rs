//! Trajectory and representation metrics plus the seeded benchmark runner.
//!
//! Alignment is judged against a reference trajectory: `r*` is the worst
//! (largest) rank of any terrain the reference crosses, and a trajectory is
//! aligned where it stays on terrain ranked `≤ r*`. The aligned fraction is
//! weighted by path length, each segment taking the terrain under its
//! midpoint.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist, Matrix};
use crate::par::{self, ExecMode};
use crate::planner::{run_episode, Episode, EpisodeConfig, Outcome, PlanError, UtilityModel};
use crate::preference::{kmeans, PrefError, PreferenceRanking};
use crate::rng::derive_rng;
use crate::worldsim::{RobotState, World};

/// Largest cluster count matched by exhaustive permutation search.
pub const MAX_MATCH_K: usize = 8;
/// Spacing used to densify polylines before terrain lookups and Hausdorff.
pub const DENSIFY_STEP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty point set")]
    Empty,
    #[error("need at least two distinct labels, got {0}")]
    TooFewLabels(usize),
    #[error("{0} labels exceed the exhaustive matching limit of {MAX_MATCH_K}")]
    TooManyLabels(usize),
    #[error("embeddings have {rows} rows but {labels} labels were given")]
    Shape { rows: usize, labels: usize },
    #[error("reference trajectory crosses no ranked terrain")]
    UnrankedReference,
    #[error("clustering: {0}")]
    Cluster(#[from] PrefError),
    #[error("planner: {0}")]
    Plan(#[from] PlanError),
}

/// `max over a of min over b` of the Euclidean distance.
pub fn directed_hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(a.iter()
        .map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max))
}

pub fn hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64, EvalError> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Insert points so consecutive points are at most `step` apart.
pub fn densify(poly: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let Some(first) = poly.first() else {
        return Vec::new();
    };
    let mut out = vec![*first];
    for w in poly.windows(2) {
        let n = (dist(&w[0], &w[1]) / step).ceil().max(1.0) as usize;
        for k in 1..=n {
            let f = k as f64 / n as f64;
            out.push([
                w[0][0] + f * (w[1][0] - w[0][0]),
                w[0][1] + f * (w[1][1] - w[0][1]),
            ]);
        }
    }
    out
}

pub fn path_length(poly: &[[f64; 2]]) -> f64 {
    poly.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

/// Terrain id to preference rank, 0 = most preferred.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerrainRanks(pub BTreeMap<u32, u32>);

impl TerrainRanks {
    /// The world's ground-truth ranks.
    pub fn oracle(world: &World) -> Self {
        Self(
            world
                .terrains()
                .iter()
                .map(|t| (t.id, t.oracle_rank))
                .collect(),
        )
    }

    pub fn from_ranking(ranking: &PreferenceRanking<u32>) -> Self {
        Self(
            ranking
                .keys()
                .into_iter()
                .filter_map(|k| ranking.rank_of(&k).map(|r| (k, r as u32)))
                .collect(),
        )
    }

    pub fn rank(&self, terrain: u32) -> Option<u32> {
        self.0.get(&terrain).copied()
    }

    /// Rank under a point; `None` outside the world or on unranked terrain.
    pub fn rank_at(&self, world: &World, p: [f64; 2]) -> Option<u32> {
        world.terrain_at(p[0], p[1]).ok().and_then(|t| self.rank(t))
    }

    /// Worst rank crossed by a reference polyline.
    pub fn worst_on(&self, world: &World, reference: &[[f64; 2]]) -> Result<u32, EvalError> {
        densify(reference, DENSIFY_STEP)
            .iter()
            .filter_map(|p| self.rank_at(world, *p))
            .max()
            .ok_or(EvalError::UnrankedReference)
    }
}

/// Goal reached and every point along the trajectory on terrain ranked no
/// worse than the worst terrain of the reference.
pub fn alignment_success(
    traj: &[[f64; 2]],
    reached_goal: bool,
    reference: &[[f64; 2]],
    world: &World,
    ranks: &TerrainRanks,
) -> Result<bool, EvalError> {
    let r_star = ranks.worst_on(world, reference)?;
    if !reached_goal {
        return Ok(false);
    }
    Ok(densify(traj, DENSIFY_STEP)
        .iter()
        .all(|p| ranks.rank_at(world, *p).is_some_and(|r| r <= r_star)))
}

/// Length-weighted share of the trajectory on terrain ranked `≤ r*`.
///
/// Each segment is cut where it crosses a grid line, so every piece lies in
/// a single cell and is classified by its midpoint. A trajectory with no
/// length counts as fully aligned when its single point is.
pub fn aligned_fraction(
    traj: &[[f64; 2]],
    world: &World,
    ranks: &TerrainRanks,
    reference: &[[f64; 2]],
) -> Result<f64, EvalError> {
    let r_star = ranks.worst_on(world, reference)?;
    let ok = |p: [f64; 2]| ranks.rank_at(world, p).is_some_and(|r| r <= r_star);
    let first = *traj.first().ok_or(EvalError::Empty)?;
    let cell = world.config().cell_size;
    let (mut good, mut total) = (0.0, 0.0);
    for w in traj.windows(2) {
        let len = dist(&w[0], &w[1]);
        total += len;
        let cuts = grid_crossings(w[0], w[1], cell);
        for t in cuts.windows(2) {
            let m = (t[0] + t[1]) / 2.0;
            let mid = [
                w[0][0] + m * (w[1][0] - w[0][0]),
                w[0][1] + m * (w[1][1] - w[0][1]),
            ];
            if ok(mid) {
                good += len * (t[1] - t[0]);
            }
        }
    }
    Ok(if total > 0.0 {
        good / total
    } else if ok(first) {
        1.0
    } else {
        0.0
    })
}

/// Sorted segment parameters in `[0, 1]` at which `a → b` crosses a grid
/// line, including both ends.
fn grid_crossings(a: [f64; 2], b: [f64; 2], cell: f64) -> Vec<f64> {
    let mut ts = vec![0.0, 1.0];
    for axis in 0..2 {
        let (p, q) = (a[axis] / cell, b[axis] / cell);
        if p == q {
            continue;
        }
        let (lo, hi) = (p.min(q), p.max(q));
        let mut k = lo.floor() + 1.0;
        while k < hi {
            ts.push((k - p) / (q - p));
            k += 1.0;
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..k).collect();
    heap_permute(k, &mut perm, &mut out);
    out
}

fn heap_permute(n: usize, perm: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if n <= 1 {
        out.push(perm.clone());
        return;
    }
    for i in 0..n - 1 {
        heap_permute(n - 1, perm, out);
        let j = if n.is_multiple_of(2) { i } else { 0 };
        perm.swap(j, n - 1);
    }
    heap_permute(n - 1, perm, out);
}

/// Best one-to-one agreement between cluster ids and label ids, both in
/// `0..k`, as a fraction of points.
pub fn matched_accuracy(
    assignment: &[usize],
    labels: &[usize],
    k: usize,
) -> Result<f64, EvalError> {
    if assignment.len() != labels.len() {
        return Err(EvalError::Shape {
            rows: assignment.len(),
            labels: labels.len(),
        });
    }
    if k > MAX_MATCH_K {
        return Err(EvalError::TooManyLabels(k));
    }
    if assignment.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&c, &l) in assignment.iter().zip(labels) {
        confusion[c][l] += 1;
    }
    let best = permutations(k)
        .iter()
        .map(|p| (0..k).map(|c| confusion[c][p[c]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / assignment.len() as f64)
}

/// k-means with one cluster per distinct label, scored by the best
/// cluster-to-label matching.
pub fn clustering_accuracy<L: Ord>(
    embeddings: &Matrix,
    labels: &[L],
    seed: u64,
) -> Result<f64, EvalError> {
    if embeddings.rows != labels.len() {
        return Err(EvalError::Shape {
            rows: embeddings.rows,
            labels: labels.len(),
        });
    }
    let distinct: BTreeSet<&L> = labels.iter().collect();
    let k = distinct.len();
    if k < 2 {
        return Err(EvalError::TooFewLabels(k));
    }
    if k > MAX_MATCH_K {
        return Err(EvalError::TooManyLabels(k));
    }
    let index: BTreeMap<&L, usize> = distinct
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let label_ids: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let clustering = kmeans(embeddings, k, seed)?;
    matched_accuracy(&clustering.assignment, &label_ids, k)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub method: String,
    pub episode: EpisodeConfig,
    pub start: RobotState,
    /// Half-width of the uniform start-position jitter, metres.
    pub start_jitter: f64,
    pub trials: usize,
    pub seed: u64,
    pub reference: Vec<[f64; 2]>,
    pub ranks: TerrainRanks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub start: RobotState,
    pub outcome: Outcome,
    pub success: bool,
    pub hausdorff_m: f64,
    pub aligned_fraction: f64,
    pub path_length_m: f64,
    pub duration_s: f64,
    #[serde(skip)]
    pub episode: Option<Episode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub trials: Vec<TrialResult>,
    pub successes: usize,
    pub hausdorff_m: Option<Summary>,
    pub aligned_fraction: Option<Summary>,
}

impl EvalReport {
    pub fn from_trials(method: String, trials: Vec<TrialResult>) -> Self {
        let h: Vec<f64> = trials.iter().map(|t| t.hausdorff_m).collect();
        let a: Vec<f64> = trials.iter().map(|t| t.aligned_fraction).collect();
        Self {
            method,
            successes: trials.iter().filter(|t| t.success).count(),
            hausdorff_m: Summary::of(&h),
            aligned_fraction: Summary::of(&a),
            trials,
        }
    }

    pub fn success_line(&self) -> String {
        format!("{}/{}", self.successes, self.trials.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One aligned text row per report.
    pub fn table(reports: &[EvalReport]) -> String {
        let fmt = |s: Option<Summary>| {
            s.map_or("-".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.sd))
        };
        let mut out = format!(
            "{:<20} {:>9} {:>17} {:>17}\n",
            "method", "success", "hausdorff_m", "aligned"
        );
        for r in reports {
            out.push_str(&format!(
                "{:<20} {:>9} {:>17} {:>17}\n",
                r.method,
                r.success_line(),
                fmt(r.hausdorff_m),
                fmt(r.aligned_fraction)
            ));
        }
        out
    }
}

/// Start pose of a trial: the nominal start jittered by a stream derived
/// from `(seed, trial)`, so every method sees the same starts.
pub fn trial_start(cfg: &BenchmarkConfig, trial: usize) -> RobotState {
    use rand::Rng as _;
    let mut rng = derive_rng(cfg.seed, trial as u64);
    let j = cfg.start_jitter;
    if j <= 0.0 {
        return cfg.start;
    }
    RobotState::new(
        cfg.start.x + rng.random_range(-j..=j),
        cfg.start.y + rng.random_range(-j..=j),
        cfg.start.theta,
    )
}

pub fn evaluate_episode(
    trial: usize,
    start: RobotState,
    episode: Episode,
    world: &World,
    cfg: &BenchmarkConfig,
) -> Result<TrialResult, EvalError> {
    let points = episode.points();
    let reached = episode.reached_goal();
    let success = alignment_success(&points, reached, &cfg.reference, world, &cfg.ranks)?;
    let aligned = aligned_fraction(&points, world, &cfg.ranks, &cfg.reference)?;
    let h = hausdorff(
        &densify(&points, DENSIFY_STEP),
        &densify(&cfg.reference, DENSIFY_STEP),
    )?;
    Ok(TrialResult {
        trial,
        start,
        outcome: episode.outcome,
        success,
        hausdorff_m: h,
        aligned_fraction: aligned,
        path_length_m: path_length(&points),
        duration_s: episode.states.last().map_or(0.0, |s| s.t),
        episode: Some(episode),
    })
}

/// Run `cfg.trials` seeded episodes with one utility model. Trials run in
/// parallel; each planner runs its own arc scoring sequentially.
pub fn run_benchmark(
    world: &World,
    utility: &dyn UtilityModel,
    cfg: &BenchmarkConfig,
    exec: ExecMode,
) -> Result<EvalReport, EvalError> {
    let mut episode_cfg = cfg.episode;
    if exec.is_parallel() {
        episode_cfg.exec = ExecMode::Sequential;
    }
    let trials = par::map_range(exec, cfg.trials, |i| {
        let start = trial_start(cfg, i);
        let episode = run_episode(
            world,
            utility,
            &episode_cfg,
            start,
            crate::rng::derive_seed(cfg.seed, i as u64),
        )?;
        evaluate_episode(i, start, episode, world, cfg)
    });
    let trials = trials.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_trials(cfg.method.clone(), trials))
}
