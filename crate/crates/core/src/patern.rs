//! Preference extrapolation to visually novel terrain.
//!
//! Before deployment, separate visual and proprioceptive encoders are trained
//! with a triplet loss on labelled terrain data, a visual utility head is
//! trained from the operator ranking, and a proprioceptive utility head is
//! distilled from it. At deployment, samples of an unfamiliar terrain are
//! embedded with the proprioceptive encoder; when their centroid lies within
//! `μ` of a known terrain's centroid the new terrain inherits that terrain's
//! rank, and the visual side is retrained on the enlarged dataset.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::{split_dataset, DataError, Dataset, Sample};
use crate::linalg::{dist, mean_vector, Matrix};
use crate::nn::{adamw_step, AdamHyper, Mlp, MlpSpec, NnError, OptimizerState, OutputActivation};
use crate::par::ExecMode;
use crate::planner::{PlanError, UtilityModel};
use crate::preference::{
    silhouette_select_k, train_utility, PrefError, PreferenceRanking, UtilityConfig, UtilityHead,
};
use crate::rng::{derive_rng, derive_seed, tag, Rng};
use crate::sterling::Standardizer;

pub const PATERN_EMBED_DIM: usize = 8;
/// Largest number of sub-terrains an adaptation set is split into.
pub const MAX_ADAPT_CLUSTERS: usize = 4;
/// Mean silhouette an adaptation-set split must reach to be used.
pub const SPLIT_SILHOUETTE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PaternError {
    #[error("sample {0} has no terrain label")]
    Unlabeled(usize),
    #[error("need at least two labelled terrains, got {0}")]
    TooFewTerrains(usize),
    #[error("adaptation set is empty")]
    EmptyAdaptationSet,
    #[error("operator feedback required: no known terrain within {mu} of the adaptation set (nearest at {distance:.3})")]
    OperatorFeedbackRequired { mu: f64, distance: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pref(#[from] PrefError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaternConfig {
    pub triplet_margin: f64,
    /// Proprioceptive distance within which a known terrain donates its rank.
    pub mu: f64,
    /// Visual distance beyond which a sample counts as novel.
    pub tau_novel: f64,
    pub split_fraction: f64,
    pub encoder_epochs: usize,
    pub batch_size: usize,
    pub encoder_opt: AdamHyper,
    pub utility: UtilityConfig,
    pub distill_epochs: usize,
    pub distill_opt: AdamHyper,
    pub seed: u64,
}

impl PaternConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            triplet_margin: 1.0,
            mu: 1.0,
            tau_novel: 1.0,
            split_fraction: 0.75,
            encoder_epochs: 40,
            batch_size: 128,
            encoder_opt: AdamHyper::with_lr(1e-3),
            utility: UtilityConfig::new(derive_seed(seed, tag("patern-utility"))),
            distill_epochs: 600,
            distill_opt: AdamHyper::with_lr(1e-3),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PaternError> {
        let bad = |m: &str| Err(PaternError::Config(m.into()));
        if !(self.triplet_margin > 0.0) {
            return bad("triplet margin must be positive");
        }
        if !(self.mu > 0.0) {
            return bad("mu must be positive");
        }
        if !(self.tau_novel >= 0.0) {
            return bad("tau_novel must be non-negative");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split fraction must lie in (0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        Ok(())
    }
}

pub fn visual_encoder_spec(visual_dim: usize) -> MlpSpec {
    MlpSpec::new(
        vec![visual_dim, 32, 32, PATERN_EMBED_DIM],
        OutputActivation::Identity,
    )
}

pub fn proprio_encoder_spec(ipt_dim: usize) -> MlpSpec {
    MlpSpec::new(
        vec![ipt_dim, 32, 32, PATERN_EMBED_DIM],
        OutputActivation::Identity,
    )
}

/// Mean over the batch of `max(0, ‖a−p‖² − ‖a−n‖² + margin)` with its
/// gradients for anchor, positive and negative.
pub fn triplet_loss(
    a: &Matrix,
    p: &Matrix,
    n: &Matrix,
    margin: f64,
) -> Result<(f64, Matrix, Matrix, Matrix), PaternError> {
    if !a.same_shape(p) || !a.same_shape(n) || a.rows == 0 {
        return Err(PaternError::Shape(
            "triplet batches must share a non-empty shape".into(),
        ));
    }
    let (rows, cols) = (a.rows, a.cols);
    let scale = 1.0 / rows as f64;
    let (mut ga, mut gp, mut gn) = (
        Matrix::zeros(rows, cols),
        Matrix::zeros(rows, cols),
        Matrix::zeros(rows, cols),
    );
    let mut total = 0.0;
    for r in 0..rows {
        let (ar, pr, nr) = (a.row(r), p.row(r), n.row(r));
        let dp: f64 = ar.iter().zip(pr).map(|(x, y)| (x - y).powi(2)).sum();
        let dn: f64 = ar.iter().zip(nr).map(|(x, y)| (x - y).powi(2)).sum();
        let l = dp - dn + margin;
        if l > 0.0 {
            total += l;
            for c in 0..cols {
                ga.set(r, c, 2.0 * (nr[c] - pr[c]) * scale);
                gp.set(r, c, -2.0 * (ar[c] - pr[c]) * scale);
                gn.set(r, c, 2.0 * (ar[c] - nr[c]) * scale);
            }
        }
    }
    Ok((total * scale, ga, gp, gn))
}

/// Triplet loss through an encoder; the gradient is with respect to the
/// encoder's flat parameters.
pub fn encoder_triplet_loss_and_grad(
    encoder: &Mlp,
    a: &Matrix,
    p: &Matrix,
    n: &Matrix,
    margin: f64,
) -> Result<(f64, Vec<f64>), PaternError> {
    let rows = a.rows;
    let mut stacked = a.data.clone();
    stacked.extend_from_slice(&p.data);
    stacked.extend_from_slice(&n.data);
    let x = Matrix::from_vec(3 * rows, a.cols, stacked);
    let (z, cache) = encoder.forward(&x)?;
    let d = z.cols;
    let part =
        |i: usize| Matrix::from_vec(rows, d, z.data[i * rows * d..(i + 1) * rows * d].to_vec());
    let (loss, ga, gp, gn) = triplet_loss(&part(0), &part(1), &part(2), margin)?;
    let mut g = ga.data;
    g.extend(gp.data);
    g.extend(gn.data);
    let (grads, _) = encoder.backward(&cache, &Matrix::from_vec(3 * rows, d, g))?;
    Ok((loss, grads.to_flat()))
}

/// Mean squared error between a utility head on `phi` and fixed targets,
/// with the gradient for the head only. The targets are plain numbers, so
/// nothing upstream of them can receive a gradient.
pub fn distill_loss_and_grad(
    head: &UtilityHead,
    phi: &Matrix,
    targets: &[f64],
) -> Result<(f64, Vec<f64>), PaternError> {
    if phi.rows != targets.len() || phi.rows == 0 {
        return Err(PaternError::Shape(
            "distillation targets must match the batch".into(),
        ));
    }
    let (u, cache) = head.mlp.forward(phi)?;
    let n = phi.rows as f64;
    let mut g = Matrix::zeros(phi.rows, 1);
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let e = u.data[i] - t;
        loss += e * e;
        g.data[i] = 2.0 * e / n;
    }
    let (grads, _) = head.mlp.backward(&cache, &g)?;
    Ok((loss / n, grads.to_flat()))
}

/// One row of the known-terrain table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownTerrain {
    pub id: u32,
    pub label: String,
    pub rank: usize,
    pub proprio_centroid: Vec<f64>,
    pub visual_centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaternReport {
    pub train_samples: usize,
    pub val_samples: usize,
    pub visual_triplet_loss: f64,
    pub proprio_triplet_loss: f64,
    /// Mean `|u_vis(φ_vis) − u_pro(φ_pro)|` on held-out paired samples.
    pub val_distill_mae: f64,
    pub distill_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaternCheckpoint {
    pub f_vis: Mlp,
    pub f_pro: Mlp,
    pub u_vis: UtilityHead,
    pub u_pro: UtilityHead,
    pub visual_norm: Standardizer,
    pub ipt_norm: Standardizer,
    /// Sorted by id.
    pub known_terrains: Vec<KnownTerrain>,
    pub ranking: PreferenceRanking<String>,
    pub config: PaternConfig,
    /// Content hashes of adaptation sets already absorbed.
    pub adaptations: Vec<String>,
    pub report: PaternReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Novelty {
    Known { id: u32, distance: f64 },
    Novel { nearest: u32, distance: f64 },
}

impl Novelty {
    pub fn is_novel(&self) -> bool {
        matches!(self, Novelty::Novel { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Extrapolation {
    Resolved {
        donor: u32,
        rank: usize,
        distance: f64,
    },
    Unresolved {
        nearest: u32,
        distance: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationGroup {
    /// Indices into the adaptation set.
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
    pub outcome: Extrapolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub checkpoint: PaternCheckpoint,
    pub new_terrains: Vec<KnownTerrain>,
    /// The adaptation set had been absorbed before; nothing changed.
    pub already_adapted: bool,
}

fn rows_matrix<R: AsRef<[f64]>>(rows: &[R], dim: usize) -> Matrix {
    if rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(rows)
    }
}

fn infer(mlp: &Mlp, norm: &Standardizer, raw: &Matrix) -> Result<Matrix, NnError> {
    if raw.rows == 0 {
        return Ok(Matrix::zeros(0, mlp.output_dim()));
    }
    mlp.infer(&norm.apply(raw))
}

impl PaternCheckpoint {
    pub fn visual_dim(&self) -> usize {
        self.f_vis.input_dim()
    }

    pub fn ipt_dim(&self) -> usize {
        self.f_pro.input_dim()
    }

    pub fn embed_visual(&self, raw: &Matrix) -> Result<Matrix, PaternError> {
        Ok(infer(&self.f_vis, &self.visual_norm, raw)?)
    }

    pub fn embed_ipt(&self, raw: &Matrix) -> Result<Matrix, PaternError> {
        Ok(infer(&self.f_pro, &self.ipt_norm, raw)?)
    }

    /// `u_vis(f_vis(v))` for a batch of raw visual descriptors.
    pub fn visual_utilities(&self, raw: &Matrix) -> Result<Vec<f64>, PaternError> {
        if raw.rows == 0 {
            return Ok(Vec::new());
        }
        Ok(self.u_vis.utilities(&self.embed_visual(raw)?)?)
    }

    /// `u_pro(f_pro(x))` for a batch of IPT features.
    pub fn proprio_utilities(&self, raw: &Matrix) -> Result<Vec<f64>, PaternError> {
        if raw.rows == 0 {
            return Ok(Vec::new());
        }
        Ok(self.u_pro.utilities(&self.embed_ipt(raw)?)?)
    }

    /// Mean visual embedding over a sample's views.
    pub fn sample_visual_embedding(&self, sample: &Sample) -> Result<Vec<f64>, PaternError> {
        let z = self.embed_visual(&rows_matrix(&sample.views, self.visual_dim()))?;
        Ok(mean_vector(&z.to_rows()))
    }

    pub fn terrain(&self, id: u32) -> Option<&KnownTerrain> {
        self.known_terrains.iter().find(|t| t.id == id)
    }

    pub fn terrain_by_label(&self, label: &str) -> Option<&KnownTerrain> {
        self.known_terrains.iter().find(|t| t.label == label)
    }

    /// Nearest known terrain under `key`, ties to the lower id.
    fn nearest_by(&self, point: &[f64], key: impl Fn(&KnownTerrain) -> &[f64]) -> (u32, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        for t in &self.known_terrains {
            let d = dist(point, key(t));
            if d < best.1 || (d == best.1 && t.id < best.0) {
                best = (t.id, d);
            }
        }
        best
    }

    /// Classify a visual embedding against the stored visual centroids.
    pub fn novelty_of_embedding(&self, embedding: &[f64]) -> Novelty {
        let (id, distance) = self.nearest_by(embedding, |t| &t.visual_centroid);
        if distance > self.config.tau_novel {
            Novelty::Novel {
                nearest: id,
                distance,
            }
        } else {
            Novelty::Known { id, distance }
        }
    }

    /// A sample is novel when its mean visual embedding is farther than
    /// `tau_novel` from every known visual centroid.
    pub fn detect_novel(&self, sample: &Sample) -> Result<Novelty, PaternError> {
        Ok(self.novelty_of_embedding(&self.sample_visual_embedding(sample)?))
    }

    /// Extrapolate from a proprioceptive centroid.
    pub fn extrapolate_centroid(&self, centroid: &[f64]) -> Extrapolation {
        let (id, distance) = self.nearest_by(centroid, |t| &t.proprio_centroid);
        match self.terrain(id) {
            Some(t) if distance <= self.config.mu => Extrapolation::Resolved {
                donor: id,
                rank: t.rank,
                distance,
            },
            _ => Extrapolation::Unresolved {
                nearest: id,
                distance,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PaternError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| PaternError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PaternError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PaternError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PaternError::Io(e.to_string()))
    }
}

impl UtilityModel for PaternCheckpoint {
    fn utilities(&self, descriptors: &Matrix) -> Result<Vec<f64>, PlanError> {
        self.visual_utilities(descriptors)
            .map_err(|e| PlanError::Utility(e.to_string()))
    }
}

/// Labelled training material with label indices.
struct Labelled<'a> {
    samples: Vec<&'a Sample>,
    labels: Vec<usize>,
}

fn labelled<'a>(
    samples: &'a [Sample],
    label_index: &BTreeMap<String, usize>,
) -> Result<Labelled<'a>, PaternError> {
    let mut out = Labelled {
        samples: Vec::new(),
        labels: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let l = s.label.as_ref().ok_or(PaternError::Unlabeled(i))?;
        let idx = *label_index
            .get(l)
            .ok_or_else(|| PaternError::Config(format!("label {l} is not ranked")))?;
        out.samples.push(s);
        out.labels.push(idx);
    }
    Ok(out)
}

/// Train an encoder with triplets whose positive shares the anchor's label
/// and whose negative does not. `rows(i)` lists the candidate inputs of
/// sample `i`; one is drawn per use.
fn train_triplet_encoder(
    spec: MlpSpec,
    rows: &[Vec<Vec<f64>>],
    labels: &[usize],
    cfg: &PaternConfig,
    seed: u64,
) -> Result<(Mlp, f64), PaternError> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(PaternError::TooFewTerrains(by_label.len()));
    }
    let dim = spec.input_dim();
    let mut encoder = Mlp::new(spec, derive_seed(seed, tag("encoder-init")))?;
    let mut flat = encoder.params.to_flat();
    let mut opt = OptimizerState::new(cfg.encoder_opt, flat.len());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let pick = |i: usize, rng: &mut Rng| -> &[f64] { &rows[i][rng.random_range(0..rows[i].len())] };
    let mut last = 0.0;
    for epoch in 0..cfg.encoder_epochs {
        let mut rng = derive_rng(seed, tag("triplet-epoch") ^ epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut a, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
            for &i in chunk {
                let same = &by_label[&labels[i]];
                let j = same[rng.random_range(0..same.len())];
                let mut other = rng.random_range(0..rows.len() - same.len());
                // map `other` onto the indices outside this label, in order
                let mut k = 0;
                loop {
                    if labels[k] != labels[i] {
                        if other == 0 {
                            break;
                        }
                        other -= 1;
                    }
                    k += 1;
                }
                a.extend_from_slice(pick(i, &mut rng));
                p.extend_from_slice(pick(j, &mut rng));
                n.extend_from_slice(pick(k, &mut rng));
            }
            let b = chunk.len();
            let (loss, grad) = encoder_triplet_loss_and_grad(
                &encoder,
                &Matrix::from_vec(b, dim, a),
                &Matrix::from_vec(b, dim, p),
                &Matrix::from_vec(b, dim, n),
                cfg.triplet_margin,
            )?;
            adamw_step(&mut flat, &grad, &mut opt)?;
            encoder.params.load_flat(&flat);
            total += loss * b as f64;
            count += b;
        }
        last = total / count.max(1) as f64;
    }
    Ok((encoder, last))
}

/// Visual encoder, its input standardizer and the final triplet loss.
fn fit_visual(
    data: &Labelled,
    cfg: &PaternConfig,
    seed: u64,
) -> Result<(Standardizer, Mlp, f64), PaternError> {
    let all: Vec<&[f64]> = data
        .samples
        .iter()
        .flat_map(|s| s.views.iter().map(Vec::as_slice))
        .collect();
    let norm = Standardizer::fit(&all);
    let rows: Vec<Vec<Vec<f64>>> = data
        .samples
        .iter()
        .map(|s| s.views.iter().map(|v| norm.apply_row(v)).collect())
        .collect();
    let (mlp, loss) = train_triplet_encoder(
        visual_encoder_spec(norm.dim()),
        &rows,
        &data.labels,
        cfg,
        derive_seed(seed, tag("f_vis")),
    )?;
    Ok((norm, mlp, loss))
}

fn fit_proprio(
    data: &Labelled,
    cfg: &PaternConfig,
    seed: u64,
) -> Result<(Standardizer, Mlp, f64), PaternError> {
    let all: Vec<&[f64]> = data.samples.iter().map(|s| s.ipt_psd.as_slice()).collect();
    let norm = Standardizer::fit(&all);
    let rows: Vec<Vec<Vec<f64>>> = data
        .samples
        .iter()
        .map(|s| vec![norm.apply_row(&s.ipt_psd)])
        .collect();
    let (mlp, loss) = train_triplet_encoder(
        proprio_encoder_spec(norm.dim()),
        &rows,
        &data.labels,
        cfg,
        derive_seed(seed, tag("f_pro")),
    )?;
    Ok((norm, mlp, loss))
}

/// Visual embeddings of every view, grouped by label.
fn visual_groups(
    f_vis: &Mlp,
    norm: &Standardizer,
    data: &Labelled,
    names: &[String],
) -> Result<BTreeMap<String, Matrix>, PaternError> {
    let mut rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (s, &l) in data.samples.iter().zip(&data.labels) {
        rows.entry(names[l].clone())
            .or_default()
            .extend(s.views.iter().cloned());
    }
    rows.into_iter()
        .map(|(k, r)| Ok((k, infer(f_vis, norm, &Matrix::from_rows(&r))?)))
        .collect()
}

/// Distillation targets: mean `u_vis(φ_vis)` over each sample's views.
fn visual_targets(
    f_vis: &Mlp,
    norm: &Standardizer,
    u_vis: &UtilityHead,
    samples: &[&Sample],
) -> Result<Vec<f64>, PaternError> {
    samples
        .iter()
        .map(|s| {
            let z = infer(f_vis, norm, &Matrix::from_rows(&s.views))?;
            let u = u_vis.utilities(&z)?;
            Ok(u.iter().sum::<f64>() / u.len() as f64)
        })
        .collect()
}

fn proprio_embeddings(
    f_pro: &Mlp,
    norm: &Standardizer,
    samples: &[&Sample],
    dim: usize,
) -> Result<Matrix, PaternError> {
    let raw: Vec<&[f64]> = samples.iter().map(|s| s.ipt_psd.as_slice()).collect();
    Ok(infer(f_pro, norm, &rows_matrix(&raw, dim))?)
}

/// Fit `u_pro` to the frozen visual targets by minibatch MSE.
fn distill(
    phi: &Matrix,
    targets: &[f64],
    cfg: &PaternConfig,
    seed: u64,
) -> Result<(UtilityHead, f64), PaternError> {
    let mut head = UtilityHead::new(PATERN_EMBED_DIM, derive_seed(seed, tag("u_pro-init")))?;
    let mut flat = head.mlp.params.to_flat();
    let mut opt = OptimizerState::new(cfg.distill_opt, flat.len());
    let mut order: Vec<usize> = (0..phi.rows).collect();
    let mut last = 0.0;
    for epoch in 0..cfg.distill_epochs {
        order.shuffle(&mut derive_rng(seed, tag("distill-epoch") ^ epoch as u64));
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = phi.select_rows(chunk);
            let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grad) = distill_loss_and_grad(&head, &x, &t)?;
            adamw_step(&mut flat, &grad, &mut opt)?;
            head.mlp.params.load_flat(&flat);
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        last = total / count.max(1) as f64;
    }
    head.meta.kind = "distilled".into();
    head.meta.seed = seed;
    head.meta.epochs = cfg.distill_epochs;
    head.meta.final_loss = last;
    Ok((head, last))
}

#[allow(clippy::too_many_arguments)]
fn build_table(
    f_vis: &Mlp,
    visual_norm: &Standardizer,
    f_pro: &Mlp,
    ipt_norm: &Standardizer,
    data: &Labelled,
    names: &[String],
    ids: &BTreeMap<String, u32>,
    ranking: &PreferenceRanking<String>,
) -> Result<Vec<KnownTerrain>, PaternError> {
    let mut table = Vec::new();
    for (l, name) in names.iter().enumerate() {
        let members: Vec<&Sample> = data
            .samples
            .iter()
            .zip(&data.labels)
            .filter(|(_, &x)| x == l)
            .map(|(s, _)| *s)
            .collect();
        if members.is_empty() {
            continue;
        }
        let phi_pro = proprio_embeddings(f_pro, ipt_norm, &members, ipt_norm.dim())?;
        let views: Vec<&Vec<f64>> = members.iter().flat_map(|s| s.views.iter()).collect();
        let phi_vis = infer(f_vis, visual_norm, &Matrix::from_rows(&views))?;
        table.push(KnownTerrain {
            id: ids[name],
            label: name.clone(),
            rank: ranking
                .rank_of(name)
                .ok_or_else(|| PaternError::Config(format!("{name} is not ranked")))?,
            proprio_centroid: mean_vector(&phi_pro.to_rows()),
            visual_centroid: mean_vector(&phi_vis.to_rows()),
        });
    }
    table.sort_by_key(|t| t.id);
    Ok(table)
}

fn distill_mae(
    f_vis: &Mlp,
    visual_norm: &Standardizer,
    u_vis: &UtilityHead,
    f_pro: &Mlp,
    ipt_norm: &Standardizer,
    u_pro: &UtilityHead,
    samples: &[&Sample],
) -> Result<f64, PaternError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let t = visual_targets(f_vis, visual_norm, u_vis, samples)?;
    let p = u_pro.utilities(&proprio_embeddings(
        f_pro,
        ipt_norm,
        samples,
        ipt_norm.dim(),
    )?)?;
    Ok(t.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64)
}

/// Train the pre-adaptation model on a labelled dataset.
///
/// The dataset is split internally into training and held-out parts; the
/// held-out part only feeds the report. Terrain ids follow the sorted order
/// of the labels.
pub fn train_preadaptation(
    dataset: &Dataset,
    ranking: &PreferenceRanking<String>,
    cfg: &PaternConfig,
) -> Result<PaternCheckpoint, PaternError> {
    cfg.validate()?;
    if let Some(i) = dataset.samples.iter().position(|s| s.label.is_none()) {
        return Err(PaternError::Unlabeled(i));
    }
    let names: Vec<String> = dataset
        .labels()
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if names.len() < 2 {
        return Err(PaternError::TooFewTerrains(names.len()));
    }
    ranking.validate(&names)?;
    let label_index: BTreeMap<String, usize> = names
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let ids: BTreeMap<String, u32> = names
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, l)| (l, i as u32))
        .collect();
    let (train, val) = split_dataset(
        dataset,
        cfg.split_fraction,
        derive_seed(cfg.seed, tag("patern-split")),
    )?;
    let data = labelled(&train.samples, &label_index)?;
    let held = labelled(&val.samples, &label_index)?;

    let (visual_norm, f_vis, vis_loss) = fit_visual(&data, cfg, cfg.seed)?;
    let (ipt_norm, f_pro, pro_loss) = fit_proprio(&data, cfg, cfg.seed)?;
    let u_vis = train_utility(
        &visual_groups(&f_vis, &visual_norm, &data, &names)?,
        ranking,
        &cfg.utility,
    )?;
    let targets = visual_targets(&f_vis, &visual_norm, &u_vis, &data.samples)?;
    let phi_pro = proprio_embeddings(&f_pro, &ipt_norm, &data.samples, ipt_norm.dim())?;
    let (u_pro, distill_loss) =
        distill(&phi_pro, &targets, cfg, derive_seed(cfg.seed, tag("u_pro")))?;
    let known_terrains = build_table(
        &f_vis,
        &visual_norm,
        &f_pro,
        &ipt_norm,
        &data,
        &names,
        &ids,
        ranking,
    )?;
    let val_distill_mae = distill_mae(
        &f_vis,
        &visual_norm,
        &u_vis,
        &f_pro,
        &ipt_norm,
        &u_pro,
        &held.samples,
    )?;
    Ok(PaternCheckpoint {
        f_vis,
        f_pro,
        u_vis,
        u_pro,
        visual_norm,
        ipt_norm,
        known_terrains,
        ranking: ranking.clone(),
        config: *cfg,
        adaptations: Vec::new(),
        report: PaternReport {
            train_samples: train.len(),
            val_samples: val.len(),
            visual_triplet_loss: vis_loss,
            proprio_triplet_loss: pro_loss,
            val_distill_mae,
            distill_loss,
        },
    })
}

/// Embed the adaptation set proprioceptively and extrapolate preferences.
///
/// When silhouette selection finds a clear split (mean silhouette at least
/// [`SPLIT_SILHOUETTE`]) each sub-cluster is extrapolated on its own and
/// sub-clusters resolving to the same donor are merged. The split is kept
/// only if every part resolves; otherwise the whole set is extrapolated
/// from its single centroid.
pub fn extrapolate_preference(
    ckpt: &PaternCheckpoint,
    set: &Dataset,
) -> Result<Vec<ExtrapolationGroup>, PaternError> {
    if set.is_empty() {
        return Err(PaternError::EmptyAdaptationSet);
    }
    let samples: Vec<&Sample> = set.samples.iter().collect();
    let phi = proprio_embeddings(&ckpt.f_pro, &ckpt.ipt_norm, &samples, ckpt.ipt_dim())?;
    let centroid = |m: &[usize]| mean_vector(&phi.select_rows(m).to_rows());
    let group = |members: Vec<usize>| {
        let c = centroid(&members);
        let outcome = ckpt.extrapolate_centroid(&c);
        ExtrapolationGroup {
            members,
            centroid: c,
            outcome,
        }
    };
    let whole = vec![group((0..phi.rows).collect())];
    let max_k = MAX_ADAPT_CLUSTERS.min(phi.rows.saturating_sub(1));
    if max_k < 2 {
        return Ok(whole);
    }
    let split = silhouette_select_k(
        &phi,
        2..=max_k,
        derive_seed(ckpt.config.seed, tag("adapt-split")),
        ExecMode::Sequential,
    )?;
    if split.mean_silhouette < SPLIT_SILHOUETTE {
        return Ok(whole);
    }
    let mut by_donor: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for members in split.members().into_iter().filter(|m| !m.is_empty()) {
        match group(members) {
            ExtrapolationGroup {
                members,
                outcome: Extrapolation::Resolved { donor, .. },
                ..
            } => by_donor.entry(donor).or_default().extend(members),
            _ => return Ok(whole),
        }
    }
    let mut groups: Vec<ExtrapolationGroup> = by_donor
        .into_values()
        .map(|mut m| {
            m.sort_unstable();
            group(m)
        })
        .collect();
    if groups
        .iter()
        .any(|g| matches!(g.outcome, Extrapolation::Unresolved { .. }))
    {
        return Ok(whole);
    }
    groups.sort_by_key(|g| g.members[0]);
    Ok(groups)
}

/// Absorb an adaptation set into a new checkpoint.
///
/// Every extrapolated group becomes a new terrain `novel-{id}` tied with
/// its donor. The visual encoder and visual utility are retrained from
/// scratch on the pre-adaptation data plus the relabelled adaptation set,
/// then the proprioceptive utility is distilled again. The proprioceptive
/// encoder stays frozen so existing proprioceptive centroids keep their
/// meaning.
pub fn adapt(
    ckpt: &PaternCheckpoint,
    pre: &Dataset,
    set: &Dataset,
    seed: u64,
) -> Result<AdaptOutcome, PaternError> {
    if set.is_empty() {
        return Err(PaternError::EmptyAdaptationSet);
    }
    let fingerprint = set.manifest.content_hash.clone();
    if ckpt.adaptations.contains(&fingerprint) {
        return Ok(AdaptOutcome {
            checkpoint: ckpt.clone(),
            new_terrains: Vec::new(),
            already_adapted: true,
        });
    }
    let groups = extrapolate_preference(ckpt, set)?;
    if let Some(d) = groups.iter().find_map(|g| match g.outcome {
        Extrapolation::Unresolved { distance, .. } => Some(distance),
        _ => None,
    }) {
        return Err(PaternError::OperatorFeedbackRequired {
            mu: ckpt.config.mu,
            distance: d,
        });
    }
    let cfg = ckpt.config;
    let mut ranking = ckpt.ranking.clone();
    let mut ids: BTreeMap<String, u32> = ckpt
        .known_terrains
        .iter()
        .map(|t| (t.label.clone(), t.id))
        .collect();
    let first_id = ckpt
        .known_terrains
        .iter()
        .map(|t| t.id + 1)
        .max()
        .unwrap_or(0);
    let mut relabelled: Vec<Sample> = set.samples.clone();
    let mut new_labels = Vec::new();
    for (next_id, g) in (first_id..).zip(&groups) {
        let Extrapolation::Resolved { donor, .. } = g.outcome else {
            unreachable!("unresolved groups rejected")
        };
        let donor_label = ckpt.terrain(donor).expect("donor from table").label.clone();
        let label = format!("novel-{next_id}");
        ranking.insert_tied(label.clone(), &donor_label)?;
        ids.insert(label.clone(), next_id);
        for &m in &g.members {
            relabelled[m].label = Some(label.clone());
        }
        new_labels.push(label);
    }

    let names: Vec<String> = ids.keys().cloned().collect();
    let label_index: BTreeMap<String, usize> = names
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let mut aggregate: Vec<Sample> = pre.samples.clone();
    aggregate.extend(relabelled);
    let data = labelled(&aggregate, &label_index)?;
    let (visual_norm, f_vis, vis_loss) = fit_visual(&data, &cfg, derive_seed(seed, tag("adapt")))?;
    let ucfg = UtilityConfig {
        seed: derive_seed(seed, tag("adapt-utility")),
        ..cfg.utility
    };
    let u_vis = train_utility(
        &visual_groups(&f_vis, &visual_norm, &data, &names)?,
        &ranking,
        &ucfg,
    )?;
    let targets = visual_targets(&f_vis, &visual_norm, &u_vis, &data.samples)?;
    let phi_pro = proprio_embeddings(&ckpt.f_pro, &ckpt.ipt_norm, &data.samples, ckpt.ipt_dim())?;
    let (u_pro, distill_loss) = distill(
        &phi_pro,
        &targets,
        &cfg,
        derive_seed(seed, tag("adapt-u_pro")),
    )?;
    let known_terrains = build_table(
        &f_vis,
        &visual_norm,
        &ckpt.f_pro,
        &ckpt.ipt_norm,
        &data,
        &names,
        &ids,
        &ranking,
    )?;
    let new_terrains: Vec<KnownTerrain> = known_terrains
        .iter()
        .filter(|t| new_labels.contains(&t.label))
        .cloned()
        .collect();
    let mut adaptations = ckpt.adaptations.clone();
    adaptations.push(fingerprint);
    let checkpoint = PaternCheckpoint {
        f_vis,
        f_pro: ckpt.f_pro.clone(),
        u_vis,
        u_pro,
        visual_norm,
        ipt_norm: ckpt.ipt_norm.clone(),
        known_terrains,
        ranking,
        config: cfg,
        adaptations,
        report: PaternReport {
            train_samples: data.samples.len(),
            val_samples: 0,
            visual_triplet_loss: vis_loss,
            proprio_triplet_loss: ckpt.report.proprio_triplet_loss,
            val_distill_mae: ckpt.report.val_distill_mae,
            distill_loss,
        },
    };
    Ok(AdaptOutcome {
        checkpoint,
        new_terrains,
        already_adapted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig};
    use crate::worldsim::RobotState;
    use rand_distr::{Distribution, StandardNormal};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn triplet_examples() {
        let a = m(&[&[0.0, 0.0]]);
        let far = m(&[&[1.0, 1.0]]);
        assert_eq!(triplet_loss(&a, &a, &far, 1.0).unwrap().0, 0.0);
        let (l, ga, gp, gn) = triplet_loss(&a, &a, &a, 1.0).unwrap();
        assert_eq!(l, 1.0);
        assert!(ga
            .data
            .iter()
            .chain(&gp.data)
            .chain(&gn.data)
            .all(|&g| g == 0.0));
        // ‖a−p‖² = 1, ‖a−n‖² = 4 + 1 = 5, margin 5 → 1
        let (l, ga, _, _) = triplet_loss(
            &m(&[&[1.0, 0.0]]),
            &m(&[&[0.0, 0.0]]),
            &m(&[&[-1.0, 1.0]]),
            5.0,
        )
        .unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert_eq!(ga.data, vec![2.0 * (-1.0 - 0.0), 2.0 * (1.0 - 0.0)]);
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_from_seed(5);
        let mut rand_m = |r: usize, c: usize| {
            Matrix::from_vec(
                r,
                c,
                (0..r * c)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect(),
            )
        };
        let (a, p, n) = (rand_m(8, 6), rand_m(8, 6), rand_m(8, 6));
        let enc = Mlp::new(visual_encoder_spec(6), 3).unwrap();
        let f = |flat: &[f64]| {
            let mut e = enc.clone();
            e.params.load_flat(flat);
            encoder_triplet_loss_and_grad(&e, &a, &p, &n, 1.0).unwrap()
        };
        let r = grad_check(
            f,
            &enc.params.to_flat(),
            1e-4,
            &GradCheckConfig::with_seed(2),
        );
        assert!(r.pass, "{r:?}");
        let head = UtilityHead::new(PATERN_EMBED_DIM, 4).unwrap();
        let phi = rand_m(8, PATERN_EMBED_DIM);
        let t: Vec<f64> = (0..8).map(|i| i as f64 * 0.3).collect();
        let g = |flat: &[f64]| {
            let mut h = head.clone();
            h.mlp.params.load_flat(flat);
            distill_loss_and_grad(&h, &phi, &t).unwrap()
        };
        let r = grad_check(
            g,
            &head.mlp.params.to_flat(),
            1e-4,
            &GradCheckConfig::with_seed(2),
        );
        assert!(r.pass, "{r:?}");
    }

    /// Three terrains separable in both modalities; the visual descriptor
    /// has no viewpoint effect here.
    pub(super) fn toy_dataset(per: usize, seed: u64, shift: f64) -> Dataset {
        let mut rng = crate::rng::rng_from_seed(seed);
        let mut samples = Vec::new();
        for (t, label) in ["a", "b", "c"].iter().enumerate() {
            for _ in 0..per {
                let mut noise = |s: f64| -> f64 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                };
                let views = (0..3)
                    .map(|_| {
                        (0..4)
                            .map(|k| if k == t { 3.0 } else { 0.0 } + noise(0.1))
                            .collect()
                    })
                    .collect();
                let ipt = (0..5)
                    .map(|k| if k == t { 2.0 + shift } else { 0.2 } + noise(0.05).abs())
                    .collect();
                samples.push(Sample {
                    state: RobotState::new(0.0, 0.0, 0.0),
                    views,
                    ipt_psd: ipt,
                    label: Some(label.to_string()),
                });
            }
        }
        Dataset::new(samples, "toy".into(), seed, 0).unwrap()
    }

    fn quick_cfg(seed: u64) -> PaternConfig {
        let mut c = PaternConfig::new(seed);
        c.encoder_epochs = 60;
        c.batch_size = 32;
        c.distill_epochs = 400;
        c.utility.epochs = 40;
        c
    }

    fn ranking() -> PreferenceRanking<String> {
        PreferenceRanking::new(vec![vec!["a".into()], vec!["b".into()], vec!["c".into()]])
    }

    #[test]
    fn preadaptation_and_extrapolation() {
        let ds = toy_dataset(40, 1, 0.0);
        let ckpt = train_preadaptation(&ds, &ranking(), &quick_cfg(7)).unwrap();
        assert_eq!(
            ckpt.known_terrains
                .iter()
                .map(|t| t.rank)
                .collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        let label_of = |s: &Sample| s.label.clone().unwrap();
        let nearest_ok = ds
            .samples
            .iter()
            .filter(|s| {
                let (id, _) = ckpt.nearest_by(&ckpt.sample_visual_embedding(s).unwrap(), |t| {
                    &t.visual_centroid
                });
                ckpt.terrain(id).unwrap().label == label_of(s)
            })
            .count();
        assert!(
            nearest_ok as f64 >= 0.95 * ds.len() as f64,
            "{nearest_ok}/{}",
            ds.len()
        );
        let known = ds
            .samples
            .iter()
            .filter(|s| {
                matches!(ckpt.detect_novel(s).unwrap(), Novelty::Known { id, .. } if ckpt.terrain(id).unwrap().label == label_of(s))
            })
            .count();
        assert!(
            known as f64 >= 0.9 * ds.len() as f64,
            "{known}/{}",
            ds.len()
        );
        // Adaptation set drawn from terrain "b"'s generators inherits its rank.
        let b_only: Vec<Sample> = toy_dataset(10, 9, 0.0)
            .samples
            .into_iter()
            .filter(|s| s.label.as_deref() == Some("b"))
            .collect();
        let set = Dataset::new(b_only, "toy".into(), 9, 0).unwrap();
        let groups = extrapolate_preference(&ckpt, &set).unwrap();
        assert_eq!(groups.len(), 1);
        assert!(
            matches!(groups[0].outcome, Extrapolation::Resolved { rank: 1, .. }),
            "{:?}",
            groups[0].outcome
        );
        assert!(ckpt.report.val_distill_mae < 0.5, "{:?}", ckpt.report);
    }

    #[test]
    fn unresolved_refuses_to_adapt() {
        let ds = toy_dataset(30, 1, 0.0);
        let ckpt = train_preadaptation(&ds, &ranking(), &quick_cfg(7)).unwrap();
        let mut far = toy_dataset(5, 3, 0.0).samples;
        for s in &mut far {
            s.ipt_psd.iter_mut().for_each(|v| *v = 60.0);
        }
        let set = Dataset::new(far, "toy".into(), 3, 0).unwrap();
        let groups = extrapolate_preference(&ckpt, &set).unwrap();
        assert!(
            groups
                .iter()
                .all(|g| matches!(g.outcome, Extrapolation::Unresolved { .. })),
            "{groups:?}"
        );
        assert!(matches!(
            adapt(&ckpt, &ds, &set, 1),
            Err(PaternError::OperatorFeedbackRequired { .. })
        ));
        let empty = Dataset::new(Vec::new(), "toy".into(), 0, 0).unwrap();
        assert!(matches!(
            adapt(&ckpt, &ds, &empty, 1),
            Err(PaternError::EmptyAdaptationSet)
        ));
    }

    #[test]
    fn nearest_ties_go_to_lower_id() {
        let ds = toy_dataset(20, 1, 0.0);
        let mut ckpt = train_preadaptation(&ds, &ranking(), &quick_cfg(7)).unwrap();
        let c = ckpt.known_terrains[2].proprio_centroid.clone();
        ckpt.known_terrains[1].proprio_centroid = c.clone();
        assert!(matches!(
            ckpt.extrapolate_centroid(&c),
            Extrapolation::Resolved { donor: 1, .. }
        ));
        ckpt.config.tau_novel = f64::INFINITY;
        assert!(ds
            .samples
            .iter()
            .all(|s| !ckpt.detect_novel(s).unwrap().is_novel()));
    }

    #[test]
    fn adapt_extends_table_and_is_idempotent() {
        let ds = toy_dataset(30, 1, 0.0);
        let ckpt = train_preadaptation(&ds, &ranking(), &quick_cfg(7)).unwrap();
        // visually new, proprioceptively identical to "a"
        let mut novel: Vec<Sample> = toy_dataset(15, 4, 0.0)
            .samples
            .into_iter()
            .filter(|s| s.label.as_deref() == Some("a"))
            .collect();
        for s in &mut novel {
            for v in &mut s.views {
                v.iter_mut().for_each(|x| *x = -*x - 2.0);
            }
            s.label = None;
        }
        let set = Dataset::new(novel, "toy".into(), 4, 0).unwrap();
        let out = adapt(&ckpt, &ds, &set, 2).unwrap();
        assert_eq!(out.new_terrains.len(), 1);
        let t = &out.new_terrains[0];
        assert_eq!((t.id, t.label.as_str(), t.rank), (3, "novel-3", 0));
        assert_eq!(
            out.checkpoint.ranking.rank_groups[0],
            vec!["a".to_string(), "novel-3".to_string()]
        );
        assert_eq!(out.checkpoint.f_pro, ckpt.f_pro);
        for (old, new) in ckpt
            .known_terrains
            .iter()
            .zip(&out.checkpoint.known_terrains)
        {
            assert_eq!(
                (old.id, &old.label, old.rank),
                (new.id, &new.label, new.rank)
            );
        }
        let again = adapt(&out.checkpoint, &ds, &set, 2).unwrap();
        assert!(again.already_adapted);
        assert_eq!(again.checkpoint, out.checkpoint);
    }

    #[test]
    fn distillation_leaves_visual_side_untouched() {
        let ds = toy_dataset(20, 1, 0.0);
        let mut none = quick_cfg(3);
        none.distill_epochs = 0;
        let a = train_preadaptation(&ds, &ranking(), &none).unwrap();
        let b = train_preadaptation(&ds, &ranking(), &quick_cfg(3)).unwrap();
        assert_eq!(a.f_vis, b.f_vis);
        assert_eq!(a.u_vis, b.u_vis);
        assert_ne!(a.u_pro, b.u_pro);
    }

    #[test]
    fn unlabeled_training_data_is_rejected() {
        let mut ds = toy_dataset(5, 1, 0.0);
        ds.samples[3].label = None;
        assert!(matches!(
            train_preadaptation(&ds, &ranking(), &quick_cfg(1)),
            Err(PaternError::Unlabeled(3))
        ));
    }
}
