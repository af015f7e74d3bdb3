//! Central finite-difference check of analytic gradients.
//!
//! The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`,
//! so gradients smaller than `floor` are judged on absolute error. When the
//! step `h` straddles a ReLU or hinge kink the central difference is biased;
//! such coordinates are retried with `h/10` and `h/100` and counted in
//! `refined`. A wrong analytic gradient cannot pass at any step.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked; all of them when the parameter vector is shorter.
    pub samples: usize,
    pub floor: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            step: 1e-5,
            samples: 200,
            floor: 1e-3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub refined: usize,
    pub pass: bool,
}

pub fn grad_check<F>(
    mut loss_fn: F,
    params: &[f64],
    tol: f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let coords: Vec<usize> = if params.len() <= cfg.samples {
        (0..params.len()).collect()
    } else {
        let mut v = sample(&mut rng_from_seed(cfg.seed), params.len(), cfg.samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: coords.len(),
        refined: 0,
        pass: true,
    };
    for &i in &coords {
        let a = analytic[i];
        let mut best = f64::INFINITY;
        for (attempt, h) in [cfg.step, cfg.step / 10.0, cfg.step / 100.0]
            .into_iter()
            .enumerate()
        {
            x[i] = params[i] + h;
            let fp = loss_fn(&x).0;
            x[i] = params[i] - h;
            let fm = loss_fn(&x).0;
            x[i] = params[i];
            let n = (fp - fm) / (2.0 * h);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
            best = best.min(err);
            if best < tol {
                if attempt > 0 {
                    report.refined += 1;
                }
                break;
            }
        }
        if best > report.max_rel_err || best.is_nan() {
            report.max_rel_err = best;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err < tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| {
            let l = x
                .iter()
                .enumerate()
                .map(|(i, v)| 0.5 * (i as f64 + 1.0) * v * v)
                .sum();
            (
                l,
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64 + 1.0) * v)
                    .collect(),
            )
        };
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let r = grad_check(f, &x, 1e-4, &GradCheckConfig::with_seed(1));
        assert!(r.pass && r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let f = |x: &[f64]| {
            let l = x.iter().map(|v| v * v).sum();
            let mut g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            g[3] *= 1.01;
            (l, g)
        };
        let x: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        let r = grad_check(f, &x, 1e-4, &GradCheckConfig::with_seed(1));
        assert!(!r.pass);
        assert_eq!(r.worst_index, 3);
    }

    #[test]
    fn kink_is_resolved_by_smaller_step() {
        // |x| with x inside the first step
        let f = |x: &[f64]| (x[0].abs(), vec![x[0].signum()]);
        let r = grad_check(f, &[3e-6], 1e-4, &GradCheckConfig::with_seed(1));
        assert!(r.pass && r.refined == 1, "{r:?}");
    }

    #[test]
    fn subsamples_large_vectors() {
        let f = |x: &[f64]| (x.iter().sum(), vec![1.0; x.len()]);
        let r = grad_check(f, &vec![0.5; 1000], 1e-4, &GradCheckConfig::with_seed(1));
        assert_eq!(r.checked, 200);
        assert!(r.pass);
    }
}
