//! Finite-difference audit of every exported training loss.
//!
//! Each entry builds a small random network (at most three layers of width
//! 32) and a batch of eight, then compares the analytic gradient against
//! central differences. Used by the `gradcheck` command and the test suite.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::nn::{grad_check, GradCheckConfig, GradCheckReport, Mlp, MlpSpec, OutputActivation};
use crate::patern::{
    distill_loss_and_grad, encoder_triplet_loss_and_grad, triplet_loss, visual_encoder_spec,
    PATERN_EMBED_DIM,
};
use crate::preference::UtilityHead;
use crate::rng::{derive_rng, derive_seed, tag};
use crate::sterling::{vicreg_loss, Objective, SterlingBatch, SterlingModel, VicregHyper};

pub const BATCH: usize = 8;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub params: usize,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientAudit {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<LossCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn gaussian(rows: usize, cols: usize, seed: u64, name: &str) -> Matrix {
    let mut rng = derive_rng(seed, tag(name));
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )
}

fn check<F>(name: &str, f: F, params: &[f64], seed: u64) -> LossCheck
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let cfg = GradCheckConfig::with_seed(derive_seed(seed, tag(name)));
    LossCheck {
        loss: name.to_string(),
        params: params.len(),
        report: grad_check(f, params, TOLERANCE, &cfg),
    }
}

/// Run the whole audit with networks and batches drawn from `seed`.
pub fn gradient_audit(seed: u64) -> GradientAudit {
    let mut checks = Vec::new();
    let hyper = VicregHyper::default();

    let (n, d) = (BATCH, 6);
    let mut z = gaussian(n, d, seed, "vicreg-z");
    z.scale(0.4);
    let mut x = z.data.clone();
    x.extend(gaussian(n, d, seed, "vicreg-z'").data);
    checks.push(check(
        "vicreg_loss",
        |p| {
            let (l, gz, gzp) = vicreg_loss(
                &Matrix::from_vec(n, d, p[..n * d].to_vec()),
                &Matrix::from_vec(n, d, p[n * d..].to_vec()),
                &hyper,
            )
            .expect("shapes agree");
            (l, gz.data.into_iter().chain(gzp.data).collect())
        },
        &x,
        seed,
    ));

    let model = SterlingModel::with_specs(
        MlpSpec::new(vec![12, 32, 32, 8], OutputActivation::Identity),
        MlpSpec::new(vec![10, 32, 8], OutputActivation::Identity),
        MlpSpec::new(vec![8, 16, 16], OutputActivation::Identity),
        derive_seed(seed, tag("sterling-model")),
    )
    .expect("valid specs");
    let batch = SterlingBatch {
        v1: gaussian(BATCH, 12, seed, "v1"),
        v2: gaussian(BATCH, 12, seed, "v2"),
        ipt: gaussian(BATCH, 10, seed, "ipt"),
    };
    for (name, objective) in [
        ("sterling_loss", Objective::Full),
        ("sterling_loss[viewpoint-only]", Objective::ViewpointOnly),
        ("sterling_loss[multi-modal-only]", Objective::MultiModalOnly),
    ] {
        checks.push(check(
            name,
            |p| {
                let mut m = model.clone();
                m.load_flat(p).expect("length matches");
                m.loss_and_grad(&batch, &hyper, objective)
                    .expect("batch fits model")
            },
            &model.to_flat(),
            seed,
        ));
    }

    let e = PATERN_EMBED_DIM;
    let (a, p, ng) = (
        gaussian(BATCH, e, seed, "anchor"),
        gaussian(BATCH, e, seed, "positive"),
        gaussian(BATCH, e, seed, "negative"),
    );
    let mut x = a.data.clone();
    x.extend(&p.data);
    x.extend(&ng.data);
    let k = BATCH * e;
    checks.push(check(
        "triplet_loss",
        |v| {
            let m = |i: usize| Matrix::from_vec(BATCH, e, v[i * k..(i + 1) * k].to_vec());
            let (l, ga, gp, gn) = triplet_loss(&m(0), &m(1), &m(2), 1.0).expect("shapes agree");
            (
                l,
                ga.data.into_iter().chain(gp.data).chain(gn.data).collect(),
            )
        },
        &x,
        seed,
    ));

    let encoder = Mlp::new(
        visual_encoder_spec(12),
        derive_seed(seed, tag("triplet-encoder")),
    )
    .expect("valid spec");
    let (ra, rp, rn) = (
        gaussian(BATCH, 12, seed, "raw-a"),
        gaussian(BATCH, 12, seed, "raw-p"),
        gaussian(BATCH, 12, seed, "raw-n"),
    );
    checks.push(check(
        "triplet_loss[through encoder]",
        |v| {
            let mut enc = encoder.clone();
            enc.params.load_flat(v);
            encoder_triplet_loss_and_grad(&enc, &ra, &rp, &rn, 1.0).expect("shapes agree")
        },
        &encoder.params.to_flat(),
        seed,
    ));

    let head = UtilityHead::new(e, derive_seed(seed, tag("ranking-head"))).expect("valid head");
    let (ua, ub) = (
        gaussian(BATCH, e, seed, "rank-a"),
        gaussian(BATCH, e, seed, "rank-b"),
    );
    let tie: Vec<bool> = (0..BATCH).map(|i| i % 3 == 0).collect();
    checks.push(check(
        "margin_ranking_loss",
        |v| {
            let mut h = head.clone();
            h.mlp.params.load_flat(v);
            h.pair_loss_and_grad(&ua, &ub, &tie, 1.0)
                .expect("pairs align")
        },
        &head.mlp.params.to_flat(),
        seed,
    ));

    let student = UtilityHead::new(e, derive_seed(seed, tag("distill-head"))).expect("valid head");
    let phi = gaussian(BATCH, e, seed, "phi-pro");
    let targets: Vec<f64> = gaussian(1, BATCH, seed, "targets")
        .data
        .iter()
        .map(|t| t.abs() * 2.0)
        .collect();
    checks.push(check(
        "distillation_mse",
        |v| {
            let mut h = student.clone();
            h.mlp.params.load_flat(v);
            distill_loss_and_grad(&h, &phi, &targets).expect("targets align")
        },
        &student.mlp.params.to_flat(),
        seed,
    ));

    let max_rel_err = checks
        .iter()
        .map(|c| c.report.max_rel_err)
        .fold(0.0, f64::max);
    let pass = checks.iter().all(|c| c.report.pass);
    GradientAudit {
        seed,
        tolerance: TOLERANCE,
        checks,
        max_rel_err,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes() {
        let audit = gradient_audit(7);
        assert_eq!(audit.checks.len(), 8);
        for c in &audit.checks {
            assert!(c.report.pass, "{}: {:?}", c.loss, c.report);
        }
        assert!(audit.max_rel_err < TOLERANCE);
    }
}
