use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; applied as `p ← p·(1 − lr·wd)` before the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper, num_params: usize) -> Self {
        Self {
            hyper,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One AdamW update with bias correction.
///
/// Non-finite gradients abort before anything is modified.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "params {}, grads {}, optimizer state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient {
            index,
            value,
            step: state.step,
        });
    }
    let h = state.hyper;
    state.step += 1;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    let decay = 1.0 - h.lr * h.weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if h.weight_decay > 0.0 {
            *p *= decay;
        }
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = OptimizerState::new(
            AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::with_lr(0.1)
            },
            3,
        );
        adamw_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = vec![1.0, -2.0];
        let mut s = OptimizerState::new(
            AdamHyper {
                lr: 1.0,
                weight_decay: 0.1,
                ..AdamHyper::default()
            },
            2,
        );
        adamw_step(&mut p, &[0.0; 2], &mut s).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] + 1.8).abs() < 1e-15);
    }

    #[test]
    fn single_step_on_square() {
        // f(w) = w², w = 1 → g = 2; m̂ = 2, v̂ = 4
        let lr = 0.01;
        let mut p = vec![1.0];
        let mut s = OptimizerState::new(
            AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::with_lr(lr)
            },
            1,
        );
        adamw_step(&mut p, &[2.0], &mut s).unwrap();
        let expected = 1.0 - lr * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(s.step, 1);
        assert!((s.m[0] - 0.2).abs() < 1e-15 && (s.v[0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![1.0, 1.0];
        let mut s = OptimizerState::new(AdamHyper::default(), 2);
        let err = adamw_step(&mut p, &[0.1, f64::NAN], &mut s).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { index: 1, .. }));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s.step, 0);
    }
}
