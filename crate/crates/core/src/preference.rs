//! Terrain preference learning: clustering of embeddings, operator rankings
//! over clusters, and the non-negative utility `u(·)` with cost `C(u) = e^{−u}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;
use std::ops::RangeInclusive;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{sq_dist, Matrix};
use crate::nn::{adamw_step, AdamHyper, Mlp, MlpSpec, NnError, OptimizerState, OutputActivation};
use crate::par::{self, ExecMode};
use crate::rng::{derive_rng, derive_seed, rng_from_seed, tag};

pub const MAX_LLOYD_ITERS: usize = 200;
pub const DEFAULT_INITS: usize = 4;
pub const LOW_CONFIDENCE_SILHOUETTE: f64 = 0.25;
pub const RANK_MARGIN: f64 = 1.0;
pub const SUPERVISED_U_MAX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("need n ≥ k ≥ 2, got n = {n}, k = {k}")]
    InvalidK { n: usize, k: usize },
    #[error("k range {0} is empty or outside [2, n−1]")]
    BadRange(String),
    #[error("invalid ranking: {0}")]
    Ranking(String),
    #[error("utility must be ≥ 0, got {0}")]
    NegativeUtility(f64),
    #[error("sample {0} has no terrain label")]
    Unlabeled(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Result of k-means on a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub mean_silhouette: f64,
    /// Set when the best mean silhouette is below the confidence threshold.
    pub low_confidence: bool,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    /// Row indices belonging to each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &a) in self.assignment.iter().enumerate() {
            m[a].push(i);
        }
        m
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn nearest(&self, point: &[f64]) -> usize {
        nearest_centroid(&self.centroids, point).0
    }
}

fn nearest_centroid(centroids: &Matrix, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(p, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &Matrix, k: usize, rng: &mut crate::rng::Rng) -> Matrix {
    let n = points.rows;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn recompute_centroids(
    points: &Matrix,
    assignment: &mut [usize],
    k: usize,
    centroids: &mut Matrix,
) {
    let d = points.cols;
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate().take(k) {
        if count > 0 {
            let inv = 1.0 / count as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    // Re-seed each empty cluster with the point farthest from its centroid,
    // taken from a cluster that can spare it.
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let dist = sq_dist(points.row(i), centroids.row(a));
            if best.is_none_or(|(_, bd)| dist > bd) {
                best = Some((i, dist));
            }
        }
        if let Some((i, _)) = best {
            counts[assignment[i]] -= 1;
            assignment[i] = c;
            counts[c] = 1;
            centroids.row_mut(c).copy_from_slice(points.row(i));
        }
    }
}

fn lloyd(points: &Matrix, mut centroids: Matrix) -> (Matrix, Vec<usize>, f64) {
    let k = centroids.rows;
    let mut assignment: Vec<usize> = (0..points.rows)
        .map(|i| nearest_centroid(&centroids, points.row(i)).0)
        .collect();
    for _ in 0..MAX_LLOYD_ITERS {
        recompute_centroids(points, &mut assignment, k, &mut centroids);
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let p = points.row(i);
            let (c, d) = nearest_centroid(&centroids, p);
            // Keep the current cluster when it is among the nearest.
            if c != *a && d < sq_dist(p, centroids.row(*a)) {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..points.rows)
        .map(|i| sq_dist(points.row(i), centroids.row(assignment[i])))
        .sum();
    (centroids, assignment, inertia)
}

/// k-means++ seeding followed by Lloyd iterations, best of `inits` seeded
/// restarts by inertia.
pub fn kmeans_with_inits(
    points: &Matrix,
    k: usize,
    seed: u64,
    inits: usize,
) -> Result<Clustering, PrefError> {
    if k < 2 || points.rows < k {
        return Err(PrefError::InvalidK { n: points.rows, k });
    }
    let mut best: Option<(Matrix, Vec<usize>, f64)> = None;
    for run in 0..inits.max(1) {
        let mut rng = derive_rng(seed, tag("kmeans") ^ run as u64);
        let init = kmeans_pp(points, k, &mut rng);
        let result = lloyd(points, init);
        if best.as_ref().is_none_or(|b| result.2 < b.2) {
            best = Some(result);
        }
    }
    let (centroids, assignment, inertia) = best.expect("at least one init");
    let mean_silhouette = silhouette(points, &assignment, k);
    Ok(Clustering {
        k,
        centroids,
        assignment,
        inertia,
        mean_silhouette,
        low_confidence: mean_silhouette < LOW_CONFIDENCE_SILHOUETTE,
    })
}

pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<Clustering, PrefError> {
    kmeans_with_inits(points, k, seed, DEFAULT_INITS)
}

/// Per-point silhouette `(b − a) / max(a, b)`; zero for singleton clusters.
pub fn silhouette_samples(points: &Matrix, assignment: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &a in assignment {
        counts[a] += 1;
    }
    (0..points.rows)
        .map(|i| {
            let own = assignment[i];
            if counts[own] < 2 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..points.rows {
                if j != i {
                    sums[assignment[j]] += crate::linalg::dist(points.row(i), points.row(j));
                }
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect()
}

pub fn silhouette(points: &Matrix, assignment: &[usize], k: usize) -> f64 {
    let s = silhouette_samples(points, assignment, k);
    if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Run k-means for every k in the range and keep the clustering with the
/// highest mean silhouette (ties go to the smaller k).
pub fn silhouette_select_k(
    points: &Matrix,
    k_range: RangeInclusive<usize>,
    seed: u64,
    exec: ExecMode,
) -> Result<Clustering, PrefError> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo > hi || lo < 2 || hi + 1 > points.rows {
        return Err(PrefError::BadRange(format!(
            "{lo}..={hi} for n = {}",
            points.rows
        )));
    }
    let ks: Vec<usize> = k_range.collect();
    let results = par::map_slice(exec, &ks, |&k| {
        kmeans(points, k, derive_seed(seed, k as u64))
    });
    let mut best: Option<Clustering> = None;
    for r in results {
        let c = r?;
        if best
            .as_ref()
            .is_none_or(|b| c.mean_silhouette > b.mean_silhouette)
        {
            best = Some(c);
        }
    }
    Ok(best.expect("non-empty range"))
}

/// The `m` members of each cluster nearest its centroid (ties by index).
pub fn sample_exemplars(points: &Matrix, clustering: &Clustering, m: usize) -> Vec<Vec<usize>> {
    clustering
        .members()
        .into_iter()
        .enumerate()
        .map(|(c, mut idx)| {
            let centre = clustering.centroids.row(c);
            idx.sort_by(|&a, &b| {
                sq_dist(points.row(a), centre)
                    .total_cmp(&sq_dist(points.row(b), centre))
                    .then(a.cmp(&b))
            });
            idx.truncate(m);
            idx
        })
        .collect()
}

/// Ordered rank groups; earlier groups are preferred, members of one group
/// are tied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRanking<K> {
    pub rank_groups: Vec<Vec<K>>,
}

impl<K: Ord + Clone + Debug> PreferenceRanking<K> {
    pub fn new(rank_groups: Vec<Vec<K>>) -> Self {
        Self { rank_groups }
    }

    /// Groups must be non-empty, disjoint, and cover exactly `universe`.
    pub fn validate(&self, universe: &[K]) -> Result<(), PrefError> {
        let mut seen = BTreeSet::new();
        for (g, group) in self.rank_groups.iter().enumerate() {
            if group.is_empty() {
                return Err(PrefError::Ranking(format!("rank group {g} is empty")));
            }
            for k in group {
                if !seen.insert(k.clone()) {
                    return Err(PrefError::Ranking(format!("{k:?} appears more than once")));
                }
            }
        }
        let want: BTreeSet<K> = universe.iter().cloned().collect();
        if let Some(missing) = want.difference(&seen).next() {
            return Err(PrefError::Ranking(format!("{missing:?} is not ranked")));
        }
        if let Some(extra) = seen.difference(&want).next() {
            return Err(PrefError::Ranking(format!("{extra:?} is not a known id")));
        }
        Ok(())
    }

    /// Group index of an id.
    pub fn rank_of(&self, key: &K) -> Option<usize> {
        self.rank_groups.iter().position(|g| g.contains(key))
    }

    pub fn keys(&self) -> Vec<K> {
        self.rank_groups.iter().flatten().cloned().collect()
    }

    /// Add `key` to the group that holds `donor`.
    pub fn insert_tied(&mut self, key: K, donor: &K) -> Result<(), PrefError> {
        let g = self
            .rank_of(donor)
            .ok_or_else(|| PrefError::Ranking(format!("donor {donor:?} is not ranked")))?;
        if self.rank_of(&key).is_none() {
            self.rank_groups[g].push(key);
            self.rank_groups[g].sort();
        }
        Ok(())
    }
}

/// Hinge for a strict pair and squared difference for a tie.
///
/// Returns the loss and its derivatives with respect to `u_a` and `u_b`.
pub fn pair_loss(u_a: f64, u_b: f64, tie: bool, margin: f64) -> (f64, f64, f64) {
    if tie {
        let d = u_a - u_b;
        (d * d, 2.0 * d, -2.0 * d)
    } else {
        let slack = margin - (u_a - u_b);
        if slack > 0.0 {
            (slack, -1.0, 1.0)
        } else {
            (0.0, 0.0, 0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityMeta {
    pub kind: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
}

/// Non-negative utility over embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityHead {
    pub mlp: Mlp,
    pub meta: UtilityMeta,
}

impl UtilityHead {
    pub fn spec(input_dim: usize) -> MlpSpec {
        MlpSpec::new(vec![input_dim, 32, 1], OutputActivation::Softplus)
    }

    pub fn new(input_dim: usize, seed: u64) -> Result<Self, PrefError> {
        Ok(Self {
            mlp: Mlp::new(Self::spec(input_dim), seed)?,
            meta: UtilityMeta {
                kind: "untrained".into(),
                seed,
                epochs: 0,
                final_loss: 0.0,
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn utilities(&self, embeddings: &Matrix) -> Result<Vec<f64>, PrefError> {
        Ok(self.mlp.infer(embeddings)?.data)
    }

    /// Mean pair loss over `(a[i], b[i])` and its gradient with respect to
    /// the head parameters.
    pub fn pair_loss_and_grad(
        &self,
        a: &Matrix,
        b: &Matrix,
        tie: &[bool],
        margin: f64,
    ) -> Result<(f64, Vec<f64>), PrefError> {
        if !a.same_shape(b) || a.rows != tie.len() || a.rows == 0 {
            return Err(PrefError::Shape("pair batches must align".into()));
        }
        let p = a.rows;
        let mut stacked = a.data.clone();
        stacked.extend_from_slice(&b.data);
        let x = Matrix::from_vec(2 * p, a.cols, stacked);
        let (u, cache) = self.mlp.forward(&x)?;
        let mut g = Matrix::zeros(2 * p, 1);
        let mut loss = 0.0;
        for (i, &t) in tie.iter().enumerate().take(p) {
            let (l, ga, gb) = pair_loss(u.data[i], u.data[p + i], t, margin);
            loss += l;
            g.data[i] = ga / p as f64;
            g.data[p + i] = gb / p as f64;
        }
        let (grads, _) = self.mlp.backward(&cache, &g)?;
        Ok((loss / p as f64, grads.to_flat()))
    }

    /// SHA-256 of the parameter bits; changes whenever the head is retrained.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mlp.params.to_flat() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `C(u) = e^{−u}` for `u ≥ 0`.
pub fn cost(u: f64) -> Result<f64, PrefError> {
    if !(u >= 0.0) {
        return Err(PrefError::NegativeUtility(u));
    }
    Ok((-u).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityConfig {
    pub margin: f64,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_pairs: usize,
    pub opt: AdamHyper,
    pub seed: u64,
}

impl UtilityConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            margin: RANK_MARGIN,
            epochs: 200,
            pairs_per_epoch: 1024,
            batch_pairs: 128,
            opt: AdamHyper {
                lr: 1e-3,
                ..AdamHyper::default()
            },
            seed,
        }
    }
}

/// Train a utility head from a ranking over groups of embeddings.
///
/// Each step draws pairs by first choosing uniformly among the available
/// pair kinds (one per ordered pair of rank groups, one per pair of tied
/// keys), so large clusters do not dominate.
pub fn train_utility<K: Ord + Clone + Debug>(
    embeddings: &BTreeMap<K, Matrix>,
    ranking: &PreferenceRanking<K>,
    cfg: &UtilityConfig,
) -> Result<UtilityHead, PrefError> {
    let keys: Vec<K> = embeddings.keys().cloned().collect();
    ranking.validate(&keys)?;
    let dim = embeddings
        .values()
        .next()
        .map(|m| m.cols)
        .ok_or_else(|| PrefError::Ranking("no clusters".into()))?;
    if let Some((k, _)) = embeddings
        .iter()
        .find(|(_, m)| m.cols != dim || m.rows == 0)
    {
        return Err(PrefError::Shape(format!(
            "embeddings for {k:?} are empty or have the wrong width"
        )));
    }
    // (preferred key, other key, tie)
    let mut kinds: Vec<(Vec<K>, Vec<K>, bool)> = Vec::new();
    for (i, gi) in ranking.rank_groups.iter().enumerate() {
        for gj in &ranking.rank_groups[i + 1..] {
            kinds.push((gi.clone(), gj.clone(), false));
        }
        for (x, a) in gi.iter().enumerate() {
            for b in &gi[x + 1..] {
                kinds.push((vec![a.clone()], vec![b.clone()], true));
            }
        }
    }
    if kinds.is_empty() {
        return Err(PrefError::Ranking("need at least two ranked keys".into()));
    }
    let mut head = UtilityHead::new(dim, derive_seed(cfg.seed, tag("utility-init")))?;
    let mut flat = head.mlp.params.to_flat();
    let mut opt = OptimizerState::new(cfg.opt, flat.len());
    let mut rng = derive_rng(cfg.seed, tag("utility-pairs"));
    let steps = cfg.pairs_per_epoch.div_ceil(cfg.batch_pairs.max(1));
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let mut a = Vec::with_capacity(cfg.batch_pairs * dim);
            let mut b = Vec::with_capacity(cfg.batch_pairs * dim);
            let mut tie = Vec::with_capacity(cfg.batch_pairs);
            for _ in 0..cfg.batch_pairs {
                let (ga, gb, t) = &kinds[rng.random_range(0..kinds.len())];
                let ka = &ga[rng.random_range(0..ga.len())];
                let kb = &gb[rng.random_range(0..gb.len())];
                let ma = &embeddings[ka];
                let mb = &embeddings[kb];
                a.extend_from_slice(ma.row(rng.random_range(0..ma.rows)));
                b.extend_from_slice(mb.row(rng.random_range(0..mb.rows)));
                tie.push(*t);
            }
            let n = tie.len();
            let (loss, grad) = head.pair_loss_and_grad(
                &Matrix::from_vec(n, dim, a),
                &Matrix::from_vec(n, dim, b),
                &tie,
                cfg.margin,
            )?;
            adamw_step(&mut flat, &grad, &mut opt)?;
            head.mlp.params.load_flat(&flat);
            epoch_loss += loss;
        }
        last = epoch_loss / steps as f64;
    }
    head.meta = UtilityMeta {
        kind: "ranking".into(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_loss: last,
    };
    Ok(head)
}

/// Regression targets of the supervised baseline: ranks spaced linearly
/// over `[0, u_max]`, most preferred at `u_max`.
pub fn linear_rank_targets(ranks: &BTreeSet<u32>, u_max: f64) -> BTreeMap<u32, f64> {
    let r = ranks.len();
    ranks
        .iter()
        .enumerate()
        .map(|(i, &rank)| {
            let t = if r > 1 {
                u_max * (1.0 - i as f64 / (r - 1) as f64)
            } else {
                u_max
            };
            (rank, t)
        })
        .collect()
}

/// Utility head regressed onto [`linear_rank_targets`] of each sample's
/// terrain label.
pub fn train_supervised_baseline(
    embeddings: &Matrix,
    labels: &[Option<String>],
    oracle_ranks: &BTreeMap<String, u32>,
    cfg: &UtilityConfig,
) -> Result<UtilityHead, PrefError> {
    if labels.len() != embeddings.rows || labels.is_empty() {
        return Err(PrefError::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows
        )));
    }
    let mut sample_ranks = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_ref().ok_or(PrefError::Unlabeled(i))?;
        let r = oracle_ranks
            .get(l)
            .ok_or_else(|| PrefError::Ranking(format!("label '{l}' has no rank")))?;
        sample_ranks.push(*r);
    }
    let targets = linear_rank_targets(&sample_ranks.iter().copied().collect(), SUPERVISED_U_MAX);
    let y: Vec<f64> = sample_ranks.iter().map(|r| targets[r]).collect();
    let mut head = UtilityHead::new(
        embeddings.cols,
        derive_seed(cfg.seed, tag("supervised-init")),
    )?;
    let mut flat = head.mlp.params.to_flat();
    let mut opt = OptimizerState::new(cfg.opt, flat.len());
    let mut order: Vec<usize> = (0..embeddings.rows).collect();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, tag("supervised-order")));
    let batch = cfg.batch_pairs.max(1);
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let x = embeddings.select_rows(chunk);
            let (u, cache) = head.mlp.forward(&x)?;
            let n = chunk.len() as f64;
            let mut g = Matrix::zeros(chunk.len(), 1);
            for (r, &i) in chunk.iter().enumerate() {
                let d = u.data[r] - y[i];
                total += d * d;
                g.data[r] = 2.0 * d / n;
            }
            let (grads, _) = head.mlp.backward(&cache, &g)?;
            adamw_step(&mut flat, &grads.to_flat(), &mut opt)?;
            head.mlp.params.load_flat(&flat);
        }
        last = total / embeddings.rows as f64;
    }
    head.meta = UtilityMeta {
        kind: "supervised".into(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_loss: last,
    };
    Ok(head)
}
