use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::linalg::Matrix;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `ln(1 + eˣ)`, keeps outputs non-negative.
    Softplus,
}

/// Layer widths `[d_in, h_1, …, d_out]`; hidden layers use ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Self {
        Self {
            layer_sizes,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::Spec("need at least one layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NnError::Spec("layer sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// One affine layer. `weights` is (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Dense {
        Dense {
            weights: Matrix::zeros(self.weights.rows, self.weights.cols),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

pub type MlpGrads = MlpParams;

impl MlpParams {
    /// Fan-in scaled uniform initialization, `U(±√(6/fan_in))`, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    weights: Matrix::from_vec(fan_out, fan_in, data),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn check_spec(&self, spec: &MlpSpec) -> Result<(), NnError> {
        spec.validate()?;
        if self.layers.len() != spec.num_layers() {
            return Err(NnError::Shape(format!(
                "{} layers, spec has {}",
                self.layers.len(),
                spec.num_layers()
            )));
        }
        for (l, w) in self.layers.iter().zip(spec.layer_sizes.windows(2)) {
            if l.weights.cols != w[0] || l.weights.rows != w[1] || l.bias.len() != w[1] {
                return Err(NnError::Shape(format!(
                    "layer is {}×{} (+{}), spec wants {}×{}",
                    l.weights.rows,
                    l.weights.cols,
                    l.bias.len(),
                    w[1],
                    w[0]
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data.len() + l.bias.len())
            .sum()
    }

    /// Layer by layer: weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.append_flat(&mut out);
        out
    }

    pub fn append_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights.data);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrite from a flat slice; returns the number of values consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.data.len();
            l.weights.data.copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        at
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for l in &self.layers {
            for v in l.weights.data.iter().chain(&l.bias) {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01B3);
                h ^= h >> 29;
            }
        }
        h
    }
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn forward(
    params: &MlpParams,
    spec: &MlpSpec,
    batch: &Matrix,
) -> Result<(Matrix, ForwardCache), NnError> {
    params.check_spec(spec)?;
    if batch.cols != spec.input_dim() {
        return Err(NnError::Shape(format!(
            "batch width {} but network input is {}",
            batch.cols,
            spec.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut x = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = x.matmul_transposed(&layer.weights);
        for r in 0..z.rows {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let mut a = z.clone();
        if i < last {
            a.data.iter_mut().for_each(|v| *v = v.max(0.0));
        } else if spec.output_activation == OutputActivation::Softplus {
            a.data.iter_mut().for_each(|v| *v = softplus(*v));
        }
        inputs.push(x);
        pre.push(z);
        x = a;
    }
    Ok((
        x,
        ForwardCache {
            fingerprint: params.fingerprint(),
            inputs,
            pre,
        },
    ))
}

pub fn backward(
    params: &MlpParams,
    spec: &MlpSpec,
    cache: &ForwardCache,
    grad_output: &Matrix,
) -> Result<(MlpGrads, Matrix), NnError> {
    if cache.fingerprint != params.fingerprint() || cache.pre.len() != params.layers.len() {
        return Err(NnError::StaleCache);
    }
    let last = params.layers.len() - 1;
    let out_pre = &cache.pre[last];
    if !grad_output.same_shape(out_pre) {
        return Err(NnError::Shape(format!(
            "grad_output is {}×{}, output is {}×{}",
            grad_output.rows, grad_output.cols, out_pre.rows, out_pre.cols
        )));
    }
    let mut grads = params.zeros_like();
    let mut g = grad_output.clone();
    if spec.output_activation == OutputActivation::Softplus {
        for (gv, z) in g.data.iter_mut().zip(&out_pre.data) {
            *gv *= sigmoid(*z);
        }
    }
    for i in (0..=last).rev() {
        if i < last {
            for (gv, z) in g.data.iter_mut().zip(&cache.pre[i].data) {
                if *z <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        // dW = gᵀ·x, db = Σ_rows g, dx = g·W
        grads.layers[i].weights = g.transpose_matmul(&cache.inputs[i]);
        let db = &mut grads.layers[i].bias;
        for r in 0..g.rows {
            for (acc, v) in db.iter_mut().zip(g.row(r)) {
                *acc += v;
            }
        }
        g = g.matmul(&params.layers[i].weights);
    }
    Ok((grads, g))
}

/// Row-wise `v / (‖v‖ + eps)`. Also returns the row norms for the backward pass.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let n = crate::linalg::norm(m.row(r));
        out.row_mut(r).iter_mut().for_each(|v| *v /= n + eps);
        norms.push(n);
    }
    (out, norms)
}

pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let n = crate::linalg::norm(v);
    v.iter().map(|x| x / (n + eps)).collect()
}

/// Gradient of [`l2_normalize_rows`] with respect to its input.
pub fn l2_normalize_backward(input: &Matrix, norms: &[f64], grad_out: &Matrix, eps: f64) -> Matrix {
    let mut g = Matrix::zeros(input.rows, input.cols);
    for (r, &n) in norms.iter().enumerate().take(input.rows) {
        let v = input.row(r);
        let go = grad_out.row(r);
        let d = n + eps;
        let vg = crate::linalg::dot(v, go);
        let k = if n > 0.0 { vg / (d * d * n) } else { 0.0 };
        for ((o, vi), gi) in g.row_mut(r).iter_mut().zip(v).zip(go) {
            *o = gi / d - vi * k;
        }
    }
    g
}

/// A network together with its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self, NnError> {
        let params = MlpParams::init(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache), NnError> {
        forward(&self.params, &self.spec, batch)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Matrix,
    ) -> Result<(MlpGrads, Matrix), NnError> {
        backward(&self.params, &self.spec, cache, grad_output)
    }

    /// Forward without keeping the cache.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix, NnError> {
        Ok(self.forward(batch)?.0)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig};

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![3, 3], OutputActivation::Identity);
        let params = MlpParams {
            layers: vec![Dense {
                weights: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
        };
        let x = rand_matrix(4, 3, 1);
        let (y, _) = forward(&params, &spec, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let spec = MlpSpec::new(vec![2, 2, 1], OutputActivation::Identity);
        let params = MlpParams {
            layers: vec![
                Dense {
                    weights: Matrix::from_vec(2, 2, vec![-1.0, 0.0, 0.0, -1.0]),
                    bias: vec![0.0; 2],
                },
                Dense {
                    weights: Matrix::from_vec(1, 2, vec![1.0, 1.0]),
                    bias: vec![0.0],
                },
            ],
        };
        let x = Matrix::from_vec(1, 2, vec![2.0, 3.0]);
        let (y, cache) = forward(&params, &spec, &x).unwrap();
        assert_eq!(y.data, vec![0.0]);
        // dead units pass no gradient
        let (g, gx) = backward(&params, &spec, &cache, &Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        assert!(g.layers[0].weights.data.iter().all(|v| *v == 0.0));
        assert!(gx.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_layer_matches_hand_product() {
        let spec = MlpSpec::new(vec![2, 3, 2], OutputActivation::Identity);
        let p = MlpParams::init(&spec, 5).unwrap();
        let x = [0.3, -0.7];
        let (y, _) = forward(&p, &spec, &Matrix::from_vec(1, 2, x.to_vec())).unwrap();
        let mut h = [0.0; 3];
        for (j, hj) in h.iter_mut().enumerate() {
            let w = &p.layers[0].weights;
            *hj = (w.get(j, 0) * x[0] + w.get(j, 1) * x[1] + p.layers[0].bias[j]).max(0.0);
        }
        for k in 0..2 {
            let w = &p.layers[1].weights;
            let o = (0..3).map(|j| w.get(k, j) * h[j]).sum::<f64>() + p.layers[1].bias[k];
            assert!((y.data[k] - o).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let spec = MlpSpec::new(vec![3, 2], OutputActivation::Identity);
        let p = MlpParams::init(&spec, 2).unwrap();
        let x = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let (_, cache) = forward(&p, &spec, &x).unwrap();
        let (g, _) = backward(&p, &spec, &cache, &Matrix::from_vec(1, 2, vec![1.0, 0.0])).unwrap();
        assert_eq!(
            g.layers[0].weights.data,
            vec![0.5, -1.0, 2.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(g.layers[0].bias, vec![1.0, 0.0]);
    }

    #[test]
    fn shape_and_stale_cache_errors() {
        let spec = MlpSpec::new(vec![3, 2], OutputActivation::Identity);
        let mut p = MlpParams::init(&spec, 2).unwrap();
        assert!(matches!(
            forward(&p, &spec, &Matrix::zeros(1, 4)),
            Err(NnError::Shape(_))
        ));
        let (_, cache) = forward(&p, &spec, &Matrix::zeros(1, 3)).unwrap();
        p.layers[0].bias[0] += 1.0;
        assert_eq!(
            backward(&p, &spec, &cache, &Matrix::zeros(1, 2)).unwrap_err(),
            NnError::StaleCache
        );
        assert!(MlpSpec::new(vec![3], OutputActivation::Identity)
            .validate()
            .is_err());
        assert!(MlpSpec::new(vec![3, 0], OutputActivation::Identity)
            .validate()
            .is_err());
    }

    #[test]
    fn random_net_gradient_matches_finite_differences() {
        for (seed, act) in [
            (1, OutputActivation::Identity),
            (2, OutputActivation::Softplus),
        ] {
            let spec = MlpSpec::new(vec![5, 32, 32, 3], act);
            let mlp = Mlp::new(spec.clone(), seed).unwrap();
            let x = rand_matrix(8, 5, seed + 10);
            let target = rand_matrix(8, 3, seed + 20);
            let loss = |flat: &[f64]| {
                let mut p = mlp.params.clone();
                p.load_flat(flat);
                let (y, cache) = forward(&p, &spec, &x).unwrap();
                let mut g = y.clone();
                let mut l = 0.0;
                for (gv, t) in g.data.iter_mut().zip(&target.data) {
                    let d = *gv - t;
                    l += 0.5 * d * d;
                    *gv = d;
                }
                let (grads, _) = backward(&p, &spec, &cache, &g).unwrap();
                (l, grads.to_flat())
            };
            let report = grad_check(
                loss,
                &mlp.params.to_flat(),
                1e-4,
                &GradCheckConfig::with_seed(seed),
            );
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![4, 16, 2], OutputActivation::Softplus);
        let mlp = Mlp::new(spec, 3).unwrap();
        let x = rand_matrix(2, 4, 9);
        let loss = |flat: &[f64]| {
            let xm = Matrix::from_vec(2, 4, flat.to_vec());
            let (y, cache) = mlp.forward(&xm).unwrap();
            let l: f64 = y.data.iter().sum();
            let (_, gx) = mlp
                .backward(&cache, &Matrix::from_vec(2, 2, vec![1.0; 4]))
                .unwrap();
            (l, gx.data)
        };
        assert!(grad_check(loss, &x.data, 1e-4, &GradCheckConfig::with_seed(1)).pass);
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0], 0.0), vec![0.6, 0.8]);
        let z = l2_normalize(&[0.0, 0.0, 0.0], 1e-8);
        assert!(z.iter().all(|v| *v == 0.0));
        let x = rand_matrix(3, 5, 4);
        let (y, _) = l2_normalize_rows(&x, 1e-8);
        for r in 0..3 {
            let n = crate::linalg::norm(y.row(r));
            assert!(n <= 1.0 && (1.0 - n) < 1e-7);
        }
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let x = rand_matrix(3, 4, 8);
        let w = rand_matrix(3, 4, 9);
        let loss = |flat: &[f64]| {
            let xm = Matrix::from_vec(3, 4, flat.to_vec());
            let (y, norms) = l2_normalize_rows(&xm, 1e-8);
            let l = crate::linalg::dot(&y.data, &w.data);
            (l, l2_normalize_backward(&xm, &norms, &w, 1e-8).data)
        };
        assert!(grad_check(loss, &x.data, 1e-4, &GradCheckConfig::with_seed(2)).pass);
    }

    #[test]
    fn init_is_pure_function_of_seed() {
        let spec = MlpSpec::new(vec![4, 8, 2], OutputActivation::Identity);
        assert_eq!(
            MlpParams::init(&spec, 3).unwrap(),
            MlpParams::init(&spec, 3).unwrap()
        );
        assert_ne!(
            MlpParams::init(&spec, 3).unwrap(),
            MlpParams::init(&spec, 4).unwrap()
        );
        let p = MlpParams::init(&spec, 3).unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(p.layers[0].weights.data.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn backward_leaves_params_untouched() {
        let mlp = Mlp::new(MlpSpec::new(vec![3, 4, 2], OutputActivation::Identity), 1).unwrap();
        let before = mlp.params.clone();
        let (_, cache) = mlp.forward(&rand_matrix(2, 3, 1)).unwrap();
        mlp.backward(&cache, &rand_matrix(2, 2, 2)).unwrap();
        assert_eq!(before, mlp.params);
    }
}
