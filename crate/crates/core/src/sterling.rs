//! Self-supervised terrain representation learning.
//!
//! A visual encoder and an IPT encoder map their inputs onto the unit
//! hypersphere; a projector shared by both modalities feeds the projections
//! to a VICReg objective that ties two viewpoints of a location together
//! (viewpoint invariance) and ties each viewpoint to the IPT signal recorded
//! there (multi-modal correlation).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::{DataError, Dataset, Sample};
use crate::linalg::Matrix;
use crate::nn::{
    adamw_step, l2_normalize_backward, l2_normalize_rows, ForwardCache, Mlp, MlpSpec, NnError,
    OptimizerState,
};
use crate::nn::{AdamHyper, OutputActivation};
use crate::rng::{derive_rng, derive_seed, tag, Rng};

/// Guard added to the norm before dividing in the hypersphere projection.
pub const NORM_EPS: f64 = 1e-10;
pub const EMBED_DIM: usize = 16;
pub const PROJ_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum SterlingError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("no usable training samples (every sample has fewer than 2 views)")]
    NoUsableSamples,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicregHyper {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub gamma_var: f64,
    pub eps_std: f64,
}

impl Default for VicregHyper {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            mu: 25.0,
            nu: 1.0,
            gamma_var: 1.0,
            eps_std: 1e-4,
        }
    }
}

/// Unweighted VICReg statistics of a pair of batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregTerms {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

fn check_pair(z: &Matrix, zp: &Matrix) -> Result<(), SterlingError> {
    if !z.same_shape(zp) {
        return Err(SterlingError::Shape(format!(
            "{}×{} vs {}×{}",
            z.rows, z.cols, zp.rows, zp.cols
        )));
    }
    if z.rows < 2 {
        return Err(SterlingError::BatchTooSmall(z.rows));
    }
    Ok(())
}

fn centered(z: &Matrix) -> Matrix {
    let means = z.column_means();
    let mut c = z.clone();
    for r in 0..c.rows {
        for (v, m) in c.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    c
}

/// Variance hinge and covariance penalty of one batch, with their gradients
/// already scaled by `mu` and `nu`.
fn var_cov(z: &Matrix, h: &VicregHyper) -> (f64, f64, Matrix) {
    let (n, d) = (z.rows, z.cols);
    let zc = centered(z);
    let denom = (n - 1) as f64;
    let mut cov = zc.transpose_matmul(&zc);
    cov.scale(1.0 / denom);

    let mut grad = Matrix::zeros(n, d);
    let mut variance = 0.0;
    for j in 0..d {
        let std = (cov.get(j, j) + h.eps_std).sqrt();
        let gap = h.gamma_var - std;
        if gap > 0.0 {
            variance += gap;
            let k = -h.mu / (d as f64 * denom * std);
            for i in 0..n {
                grad.data[i * d + j] += k * zc.get(i, j);
            }
        }
    }
    variance /= d as f64;

    let mut off = cov;
    let mut covariance = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j == k {
                off.set(j, k, 0.0);
            } else {
                covariance += off.get(j, k).powi(2);
            }
        }
    }
    covariance /= d as f64;
    let mut gc = zc.matmul(&off);
    gc.scale(4.0 * h.nu / (d as f64 * denom));
    grad.add_assign(&gc);
    (variance, covariance, grad)
}

/// Unweighted VICReg statistics, for inspection and oracles.
pub fn vicreg_terms(
    z: &Matrix,
    zp: &Matrix,
    hyper: &VicregHyper,
) -> Result<VicregTerms, SterlingError> {
    check_pair(z, zp)?;
    let (v1, c1, _) = var_cov(z, hyper);
    let (v2, c2, _) = var_cov(zp, hyper);
    let invariance = (0..z.rows)
        .map(|i| crate::linalg::dist(z.row(i), zp.row(i)))
        .sum::<f64>()
        / z.rows as f64;
    Ok(VicregTerms {
        invariance,
        variance: v1 + v2,
        covariance: c1 + c2,
    })
}

/// `λ·s(Z,Z') + μ·(v(Z)+v(Z')) + ν·(c(Z)+c(Z'))` and its gradients with
/// respect to `Z` and `Z'`.
///
/// `s` is the mean unsquared Euclidean distance between paired rows; where a
/// pair coincides its subgradient is taken as zero. Variances and covariances
/// use the `n − 1` estimator.
pub fn vicreg_loss(
    z: &Matrix,
    zp: &Matrix,
    hyper: &VicregHyper,
) -> Result<(f64, Matrix, Matrix), SterlingError> {
    check_pair(z, zp)?;
    let n = z.rows;
    let (v1, c1, mut gz) = var_cov(z, hyper);
    let (v2, c2, mut gzp) = var_cov(zp, hyper);
    let mut invariance = 0.0;
    for i in 0..n {
        let dist = crate::linalg::dist(z.row(i), zp.row(i));
        invariance += dist;
        if dist > 0.0 {
            let k = hyper.lambda / (n as f64 * dist);
            for j in 0..z.cols {
                let diff = k * (z.get(i, j) - zp.get(i, j));
                gz.data[i * z.cols + j] += diff;
                gzp.data[i * z.cols + j] -= diff;
            }
        }
    }
    invariance /= n as f64;
    let loss = hyper.lambda * invariance + hyper.mu * (v1 + v2) + hyper.nu * (c1 + c2);
    Ok((loss, gz, gzp))
}

/// Which terms of the STERLING objective are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Viewpoint invariance plus multi-modal correlation.
    #[default]
    Full,
    ViewpointOnly,
    MultiModalOnly,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "vi+mm" => Ok(Objective::Full),
            "viewpoint-only" | "vi" => Ok(Objective::ViewpointOnly),
            "multi-modal-only" | "mm" => Ok(Objective::MultiModalOnly),
            other => Err(format!(
                "unknown objective '{other}' (full, viewpoint-only, multi-modal-only)"
            )),
        }
    }
}

/// Loss value and gradients with respect to the three projections.
#[derive(Debug, Clone)]
pub struct SterlingGrads {
    pub loss: f64,
    pub d_v1: Matrix,
    pub d_v2: Matrix,
    pub d_i: Matrix,
}

/// `V(ψv1, ψv2) + [V(ψv1, ψi) + V(ψv2, ψi)] / 2`.
pub fn sterling_loss(
    psi_v1: &Matrix,
    psi_v2: &Matrix,
    psi_i: &Matrix,
    hyper: &VicregHyper,
) -> Result<SterlingGrads, SterlingError> {
    objective_loss(psi_v1, psi_v2, psi_i, hyper, Objective::Full)
}

pub fn objective_loss(
    psi_v1: &Matrix,
    psi_v2: &Matrix,
    psi_i: &Matrix,
    hyper: &VicregHyper,
    objective: Objective,
) -> Result<SterlingGrads, SterlingError> {
    check_pair(psi_v1, psi_v2)?;
    check_pair(psi_v1, psi_i)?;
    let mut out = SterlingGrads {
        loss: 0.0,
        d_v1: Matrix::zeros(psi_v1.rows, psi_v1.cols),
        d_v2: Matrix::zeros(psi_v1.rows, psi_v1.cols),
        d_i: Matrix::zeros(psi_v1.rows, psi_v1.cols),
    };
    if objective != Objective::MultiModalOnly {
        let (l, g1, g2) = vicreg_loss(psi_v1, psi_v2, hyper)?;
        out.loss += l;
        out.d_v1.add_assign(&g1);
        out.d_v2.add_assign(&g2);
    }
    if objective != Objective::ViewpointOnly {
        for (v, dv) in [(psi_v1, &mut out.d_v1), (psi_v2, &mut out.d_v2)] {
            let (l, mut gv, mut gi) = vicreg_loss(v, psi_i, hyper)?;
            out.loss += 0.5 * l;
            gv.scale(0.5);
            gi.scale(0.5);
            dv.add_assign(&gv);
            out.d_i.add_assign(&gi);
        }
    }
    Ok(out)
}

/// Per-feature affine standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mean = crate::linalg::mean_vector(rows);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((acc, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *acc += (v - m).powi(2);
            }
        }
        let n = rows.len().max(1) as f64;
        let scale = var
            .into_iter()
            .map(|v| (v / n).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows {
            for ((v, mu), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / s;
            }
        }
        out
    }
}

/// The trainable part of STERLING: both encoders and the shared projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SterlingModel {
    pub visual: Mlp,
    pub ipt: Mlp,
    pub projector: Mlp,
}

/// One minibatch: two views and the IPT features of each location, already
/// standardized.
#[derive(Debug, Clone)]
pub struct SterlingBatch {
    pub v1: Matrix,
    pub v2: Matrix,
    pub ipt: Matrix,
}

struct Branch {
    enc_cache: ForwardCache,
    enc_out: Matrix,
    norms: Vec<f64>,
    proj_cache: ForwardCache,
    proj: Matrix,
}

impl SterlingModel {
    pub fn visual_spec(visual_dim: usize) -> MlpSpec {
        MlpSpec::new(
            vec![visual_dim, 64, 64, EMBED_DIM],
            OutputActivation::Identity,
        )
    }

    pub fn ipt_spec(ipt_dim: usize) -> MlpSpec {
        MlpSpec::new(
            vec![ipt_dim, 64, 64, 64, EMBED_DIM],
            OutputActivation::Identity,
        )
    }

    pub fn projector_spec() -> MlpSpec {
        MlpSpec::new(
            vec![EMBED_DIM, PROJ_DIM, PROJ_DIM],
            OutputActivation::Identity,
        )
    }

    pub fn new(visual_dim: usize, ipt_dim: usize, seed: u64) -> Result<Self, SterlingError> {
        Self::with_specs(
            Self::visual_spec(visual_dim),
            Self::ipt_spec(ipt_dim),
            Self::projector_spec(),
            seed,
        )
    }

    /// Arbitrary architectures, as long as both encoders feed the projector.
    pub fn with_specs(
        visual: MlpSpec,
        ipt: MlpSpec,
        projector: MlpSpec,
        seed: u64,
    ) -> Result<Self, SterlingError> {
        if visual.output_dim() != projector.input_dim() || ipt.output_dim() != projector.input_dim()
        {
            return Err(SterlingError::Shape(
                "encoder outputs must match the projector input".into(),
            ));
        }
        Ok(Self {
            visual: Mlp::new(visual, derive_seed(seed, tag("visual-encoder")))?,
            ipt: Mlp::new(ipt, derive_seed(seed, tag("ipt-encoder")))?,
            projector: Mlp::new(projector, derive_seed(seed, tag("projector")))?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.visual.num_params() + self.ipt.num_params() + self.projector.num_params()
    }

    /// Visual encoder, IPT encoder, projector, each layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visual.params.append_flat(&mut out);
        self.ipt.params.append_flat(&mut out);
        self.projector.params.append_flat(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), SterlingError> {
        if flat.len() != self.num_params() {
            return Err(SterlingError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let a = self.visual.params.load_flat(flat);
        let b = self.ipt.params.load_flat(&flat[a..]);
        self.projector.params.load_flat(&flat[a + b..]);
        Ok(())
    }

    fn branch(&self, encoder: &Mlp, x: &Matrix) -> Result<Branch, SterlingError> {
        let (enc_out, enc_cache) = encoder.forward(x)?;
        let (normed, norms) = l2_normalize_rows(&enc_out, NORM_EPS);
        let (proj, proj_cache) = self.projector.forward(&normed)?;
        Ok(Branch {
            enc_cache,
            enc_out,
            norms,
            proj_cache,
            proj,
        })
    }

    /// Returns (encoder grads, projector grads) flattened.
    fn branch_backward(
        &self,
        encoder: &Mlp,
        b: &Branch,
        g: &Matrix,
    ) -> Result<(Vec<f64>, Vec<f64>), SterlingError> {
        let (pg, g_normed) = self.projector.backward(&b.proj_cache, g)?;
        let g_enc = l2_normalize_backward(&b.enc_out, &b.norms, &g_normed, NORM_EPS);
        let (eg, _) = encoder.backward(&b.enc_cache, &g_enc)?;
        Ok((eg.to_flat(), pg.to_flat()))
    }

    /// Objective value and its gradient with respect to [`Self::to_flat`].
    pub fn loss_and_grad(
        &self,
        batch: &SterlingBatch,
        hyper: &VicregHyper,
        objective: Objective,
    ) -> Result<(f64, Vec<f64>), SterlingError> {
        let b1 = self.branch(&self.visual, &batch.v1)?;
        let b2 = self.branch(&self.visual, &batch.v2)?;
        let bi = self.branch(&self.ipt, &batch.ipt)?;
        let g = objective_loss(&b1.proj, &b2.proj, &bi.proj, hyper, objective)?;
        let (ev1, p1) = self.branch_backward(&self.visual, &b1, &g.d_v1)?;
        let (ev2, p2) = self.branch_backward(&self.visual, &b2, &g.d_v2)?;
        let (ei, pi) = self.branch_backward(&self.ipt, &bi, &g.d_i)?;
        let mut flat = Vec::with_capacity(self.num_params());
        flat.extend(ev1.iter().zip(&ev2).map(|(a, b)| a + b));
        flat.extend(ei);
        flat.extend(p1.iter().zip(&p2).zip(&pi).map(|((a, b), c)| a + b + c));
        Ok((g.loss, flat))
    }

    pub fn loss(
        &self,
        batch: &SterlingBatch,
        hyper: &VicregHyper,
        objective: Objective,
    ) -> Result<f64, SterlingError> {
        let p = |enc: &Mlp, x: &Matrix| -> Result<Matrix, SterlingError> {
            let e = enc.infer(x)?;
            Ok(self.projector.infer(&l2_normalize_rows(&e, NORM_EPS).0)?)
        };
        Ok(objective_loss(
            &p(&self.visual, &batch.v1)?,
            &p(&self.visual, &batch.v2)?,
            &p(&self.ipt, &batch.ipt)?,
            hyper,
            objective,
        )?
        .loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SterlingConfig {
    pub hyper: VicregHyper,
    pub opt: AdamHyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub objective: Objective,
    pub seed: u64,
}

impl SterlingConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            hyper: VicregHyper::default(),
            opt: AdamHyper::default(),
            epochs: 50,
            batch_size: 128,
            objective: Objective::Full,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when the validation set has fewer than two usable samples.
    pub val_loss: Option<f64>,
}

/// Trained STERLING encoders plus everything needed to apply them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: SterlingModel,
    pub visual_norm: Standardizer,
    pub ipt_norm: Standardizer,
    pub config: SterlingConfig,
    pub history: Vec<EpochLoss>,
    /// Training samples ignored for having fewer than two views.
    pub skipped_samples: usize,
}

impl Checkpoint {
    pub fn visual_dim(&self) -> usize {
        self.model.visual.input_dim()
    }

    pub fn ipt_dim(&self) -> usize {
        self.model.ipt.input_dim()
    }

    /// Unit-norm visual embeddings of a batch of raw descriptors.
    pub fn encode_visual_batch(&self, descriptors: &Matrix) -> Result<Matrix, SterlingError> {
        let e = self
            .model
            .visual
            .infer(&self.visual_norm.apply(descriptors))?;
        Ok(l2_normalize_rows(&e, NORM_EPS).0)
    }

    pub fn encode_ipt_batch(&self, features: &Matrix) -> Result<Matrix, SterlingError> {
        let e = self.model.ipt.infer(&self.ipt_norm.apply(features))?;
        Ok(l2_normalize_rows(&e, NORM_EPS).0)
    }

    pub fn encode_visual(&self, descriptor: &[f64]) -> Result<Vec<f64>, SterlingError> {
        Ok(self
            .encode_visual_batch(&Matrix::from_rows(&[descriptor]))?
            .data)
    }

    pub fn encode_ipt(&self, features: &[f64]) -> Result<Vec<f64>, SterlingError> {
        Ok(self.encode_ipt_batch(&Matrix::from_rows(&[features]))?.data)
    }

    /// Embedding of the most recent view of every sample.
    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<Matrix, SterlingError> {
        let rows: Vec<&[f64]> = dataset
            .samples
            .iter()
            .map(|s| s.views[0].as_slice())
            .collect();
        self.encode_visual_batch(&Matrix::from_rows(&rows))
    }

    /// `epoch,train_loss,val_loss` with a header row.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.history {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, val));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), SterlingError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| SterlingError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, SterlingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SterlingError::Io(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| SterlingError::Io(format!("{}: {e}", path.display())))?;
        if !(ckpt.model.visual.params.is_finite() && ckpt.model.ipt.params.is_finite()) {
            return Err(SterlingError::Io(format!(
                "{}: non-finite parameters",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

/// Pick two distinct views of each sample and stack them with its IPT vector.
fn make_batch(
    samples: &[&Sample],
    visual_norm: &Standardizer,
    ipt_norm: &Standardizer,
    rng: &mut Rng,
) -> SterlingBatch {
    let n = samples.len();
    let dv = visual_norm.dim();
    let di = ipt_norm.dim();
    let (mut v1, mut v2, mut ipt) = (
        Vec::with_capacity(n * dv),
        Vec::with_capacity(n * dv),
        Vec::with_capacity(n * di),
    );
    for s in samples {
        let (a, b) = if s.views.len() == 2 {
            (0, 1)
        } else {
            let a = rng.random_range(0..s.views.len());
            let mut b = rng.random_range(0..s.views.len() - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        };
        v1.extend(visual_norm.apply_row(&s.views[a]));
        v2.extend(visual_norm.apply_row(&s.views[b]));
        ipt.extend(ipt_norm.apply_row(&s.ipt_psd));
    }
    SterlingBatch {
        v1: Matrix::from_vec(n, dv, v1),
        v2: Matrix::from_vec(n, dv, v2),
        ipt: Matrix::from_vec(n, di, ipt),
    }
}

fn usable(dataset: &Dataset) -> Vec<&Sample> {
    dataset
        .samples
        .iter()
        .filter(|s| s.views.len() >= 2)
        .collect()
}

/// Split `len` items into batches of `size`, folding a trailing singleton
/// into the previous batch since batch statistics need two rows.
fn batch_bounds(len: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..len)
        .step_by(size.max(2))
        .map(|s| (s, (s + size.max(2)).min(len)))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s < 2) {
        let (_, e) = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").1 = e;
    }
    out.retain(|&(s, e)| e - s >= 2);
    out
}

/// Train both encoders and the projector jointly with AdamW.
///
/// Deterministic in `cfg.seed`. Validation loss uses a fixed view pairing so
/// epochs are comparable.
pub fn train_sterling(
    train: &Dataset,
    val: &Dataset,
    cfg: &SterlingConfig,
) -> Result<Checkpoint, SterlingError> {
    let visual_dim = train.manifest.visual_dim;
    let ipt_dim = train.manifest.ipt_dim;
    if val.manifest.visual_dim != visual_dim || val.manifest.ipt_dim != ipt_dim {
        return Err(SterlingError::Shape(
            "train and validation sets disagree on dimensions".into(),
        ));
    }
    let samples = usable(train);
    let skipped = train.len() - samples.len();
    if samples.len() < 2 {
        return Err(SterlingError::NoUsableSamples);
    }
    let all_views: Vec<&[f64]> = samples
        .iter()
        .flat_map(|s| s.views.iter().map(Vec::as_slice))
        .collect();
    let all_ipt: Vec<&[f64]> = samples.iter().map(|s| s.ipt_psd.as_slice()).collect();
    let visual_norm = Standardizer::fit(&all_views);
    let ipt_norm = Standardizer::fit(&all_ipt);
    let mut model = SterlingModel::new(visual_dim, ipt_dim, cfg.seed)?;

    let val_samples = usable(val);
    let val_batches: Vec<SterlingBatch> = {
        let mut rng = derive_rng(cfg.seed, tag("val-views"));
        batch_bounds(val_samples.len(), cfg.batch_size)
            .into_iter()
            .map(|(s, e)| make_batch(&val_samples[s..e], &visual_norm, &ipt_norm, &mut rng))
            .collect()
    };

    let mut flat = model.to_flat();
    let mut opt = OptimizerState::new(cfg.opt, flat.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = derive_rng(cfg.seed, tag("epoch") ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (s, e) in batch_bounds(order.len(), cfg.batch_size) {
            let chosen: Vec<&Sample> = order[s..e].iter().map(|&i| samples[i]).collect();
            let batch = make_batch(&chosen, &visual_norm, &ipt_norm, &mut rng);
            let (loss, grad) = model.loss_and_grad(&batch, &cfg.hyper, cfg.objective)?;
            adamw_step(&mut flat, &grad, &mut opt)?;
            model.load_flat(&flat)?;
            total += loss * chosen.len() as f64;
            count += chosen.len();
        }
        let val_loss = if val_batches.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            let mut n = 0usize;
            for b in &val_batches {
                sum += model.loss(b, &cfg.hyper, cfg.objective)? * b.v1.rows as f64;
                n += b.v1.rows;
            }
            Some(sum / n as f64)
        };
        history.push(EpochLoss {
            epoch: epoch + 1,
            train_loss: total / count as f64,
            val_loss,
        });
    }
    Ok(Checkpoint {
        model,
        visual_norm,
        ipt_norm,
        config: *cfg,
        history,
        skipped_samples: skipped,
    })
}
