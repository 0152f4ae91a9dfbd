//! Two-layer MLP (hidden ReLU, sigmoid or linear head) with hand-written
//! gradients, plus the losses and the SGD step used everywhere in training.
//!
//! The scalar `bias_offset` added to the pre-activation of the output layer
//! is the per-client strategy term; passing 0 recovers a plain MLP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Sigmoid,
    Linear,
}

/// Parameters of the two-layer network. The flat serialization order is
/// fixed: W1 row-major, b1, W2, b2. Element-wise averaging of flattened
/// parameter vectors is therefore well-defined across models of equal shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpParams {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        MlpParams {
            w1: Matrix::zeros(hidden, in_dim),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Xavier-uniform initialization; biases start at zero.
    pub fn xavier(in_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut p = MlpParams::zeros(in_dim, hidden);
        let a1 = (6.0 / (in_dim + hidden) as f64).sqrt();
        for v in p.w1.data_mut() {
            *v = (2.0 * rng.next_f64() - 1.0) * a1;
        }
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        for v in p.w2.iter_mut() {
            *v = (2.0 * rng.next_f64() - 1.0) * a2;
        }
        p
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn flat_len(&self) -> usize {
        self.hidden_dim() * self.in_dim() + self.hidden_dim() * 2 + 1
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn from_flat(in_dim: usize, hidden: usize, flat: &[f64]) -> Result<Self> {
        let expected = hidden * in_dim + hidden * 2 + 1;
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, expected {} for in={} hidden={}",
                flat.len(),
                expected,
                in_dim,
                hidden
            )));
        }
        let w1_len = hidden * in_dim;
        Ok(MlpParams {
            w1: Matrix::from_vec(hidden, in_dim, flat[..w1_len].to_vec())?,
            b1: flat[w1_len..w1_len + hidden].to_vec(),
            w2: flat[w1_len + hidden..w1_len + 2 * hidden].to_vec(),
            b2: flat[w1_len + 2 * hidden],
        })
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.in_dim() == other.in_dim() && self.hidden_dim() == other.hidden_dim()
    }

    /// `self += scale * other`, used for gradient accumulation.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("add_scaled: parameter shapes differ".into()));
        }
        for (a, b) in self.w1.data_mut().iter_mut().zip(other.w1.data()) {
            *a += scale * b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += scale * b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += scale * b;
        }
        self.b2 += scale * other.b2;
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

const PROB_CLAMP: f64 = 1e-7;

/// Binary cross entropy; the probability is clamped to
/// [1e-7, 1 - 1e-7] before the logs.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

pub fn mse_loss(pred: f64, y: f64) -> f64 {
    let d = pred - y;
    d * d
}

/// Activations kept from a forward pass, sufficient for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    z1: Vec<f64>,
    z2: f64,
    output: f64,
    kind: OutputKind,
}

impl ForwardCache {
    pub fn output(&self) -> f64 {
        self.output
    }

    pub fn logit(&self) -> f64 {
        self.z2
    }
}

/// Evaluates `head(W2 . relu(W1 x + b1) + b2 + bias_offset)` where `head` is
/// the sigmoid or the identity depending on `kind`.
pub fn mlp_forward(
    p: &MlpParams,
    input: &[f64],
    bias_offset: f64,
    kind: OutputKind,
) -> Result<(f64, ForwardCache)> {
    if input.len() != p.in_dim() {
        return Err(Error::Shape(format!(
            "mlp_forward: input has {} entries, model expects {}",
            input.len(),
            p.in_dim()
        )));
    }
    let mut z1 = p.w1.matvec(input)?;
    for (z, b) in z1.iter_mut().zip(&p.b1) {
        *z += b;
    }
    let mut z2 = p.b2 + bias_offset;
    for (&z, &w) in z1.iter().zip(&p.w2) {
        z2 += w * z.max(0.0);
    }
    let output = match kind {
        OutputKind::Sigmoid => sigmoid(z2),
        OutputKind::Linear => z2,
    };
    Ok((
        output,
        ForwardCache {
            input: input.to_vec(),
            z1,
            z2,
            output,
            kind,
        },
    ))
}

/// Gradients in the same shape as the parameters, plus the gradient with
/// respect to the bias offset (the per-client scalar).
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub params: MlpParams,
    pub bias_offset: f64,
}

impl MlpGradients {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        MlpGradients {
            params: MlpParams::zeros(in_dim, hidden),
            bias_offset: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGradients, scale: f64) -> Result<()> {
        self.params.add_scaled(&other.params, scale)?;
        self.bias_offset += scale * other.bias_offset;
        Ok(())
    }
}

fn check_cache(p: &MlpParams, cache: &ForwardCache) -> Result<()> {
    if cache.input.len() != p.in_dim() || cache.z1.len() != p.hidden_dim() {
        return Err(Error::Contract(
            "mlp_backward: cache does not match the parameter shape (stale cache?)".into(),
        ));
    }
    Ok(())
}

/// Backprop from `upstream = dL/d(output)` through the head activation and
/// both layers. Returns dL/d(each parameter) including dL/d(bias_offset).
pub fn mlp_backward(p: &MlpParams, cache: &ForwardCache, upstream: f64) -> Result<MlpGradients> {
    let d_z2 = match cache.kind {
        OutputKind::Sigmoid => upstream * cache.output * (1.0 - cache.output),
        OutputKind::Linear => upstream,
    };
    mlp_backward_logit(p, cache, d_z2)
}

/// Backprop from `d_logit = dL/d(z2)`, the gradient at the output-layer
/// pre-activation. Training loops use this entry point with the fused
/// BCE-through-sigmoid gradient `p - y` for numerical robustness.
pub fn mlp_backward_logit(p: &MlpParams, cache: &ForwardCache, d_logit: f64) -> Result<MlpGradients> {
    check_cache(p, cache)?;
    let hidden = p.hidden_dim();
    let in_dim = p.in_dim();
    let mut g = MlpGradients::zeros(in_dim, hidden);
    g.params.b2 = d_logit;
    g.bias_offset = d_logit;
    for j in 0..hidden {
        let a1 = cache.z1[j].max(0.0);
        g.params.w2[j] = d_logit * a1;
        if cache.z1[j] > 0.0 {
            let d_z1 = d_logit * p.w2[j];
            g.params.b1[j] = d_z1;
            let row = g.params.w1.row_mut(j);
            for (w, x) in row.iter_mut().zip(&cache.input) {
                *w = d_z1 * x;
            }
        }
    }
    Ok(g)
}

/// Accumulates the backprop of `d_logit = dL/d(z2)` directly into `acc`,
/// avoiding a per-record gradient allocation in training loops.
pub fn mlp_backward_logit_into(
    p: &MlpParams,
    cache: &ForwardCache,
    d_logit: f64,
    acc: &mut MlpParams,
) -> Result<()> {
    check_cache(p, cache)?;
    if !p.same_shape(acc) {
        return Err(Error::Shape("backward accumulate: shapes differ".into()));
    }
    acc.b2 += d_logit;
    for j in 0..p.hidden_dim() {
        let z = cache.z1[j];
        acc.w2[j] += d_logit * z.max(0.0);
        if z > 0.0 {
            let d_z1 = d_logit * p.w2[j];
            acc.b1[j] += d_z1;
            let row = acc.w1.row_mut(j);
            for (w, x) in row.iter_mut().zip(&cache.input) {
                *w += d_z1 * x;
            }
        }
    }
    Ok(())
}

/// In-place SGD update `p -= lr * g`. Rejects non-finite gradients, naming
/// the first offending flat index.
pub fn sgd_step(p: &mut MlpParams, g: &MlpParams, lr: f64) -> Result<()> {
    if !p.same_shape(g) {
        return Err(Error::Shape("sgd_step: gradient shape differs".into()));
    }
    if !(g.w1.is_finite() && g.b1.iter().all(|v| v.is_finite()) && g.w2.iter().all(|v| v.is_finite()) && g.b2.is_finite())
    {
        let flat = g.flatten();
        let idx = flat.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite(format!(
            "sgd_step: gradient entry {idx} is {}",
            flat[idx]
        )));
    }
    p.add_scaled(g, -lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_params(in_dim: usize, hidden: usize, seed: u64) -> MlpParams {
        let mut rng = Rng::new(seed);
        MlpParams::xavier(in_dim, hidden, &mut rng)
    }

    #[test]
    fn zero_params_sigmoid_is_half() {
        let p = MlpParams::zeros(4, 8);
        let (out, _) = mlp_forward(&p, &[0.3, -0.1, 2.0, 0.0], 0.0, OutputKind::Sigmoid).unwrap();
        assert_eq!(out, 0.5);
    }

    #[test]
    fn bias_offset_drives_output() {
        let p = MlpParams::zeros(4, 8);
        let (out, _) = mlp_forward(&p, &[1.0, 1.0, 1.0, 1.0], 10.0, OutputKind::Sigmoid).unwrap();
        assert!((out - sigmoid(10.0)).abs() < 1e-15);
        assert!((out - 0.9999546021312976).abs() < 1e-9);
    }

    // Independent straight-line re-evaluation of the same formula.
    fn forward_oracle(p: &MlpParams, x: &[f64], h: f64, kind: OutputKind) -> f64 {
        let mut z2 = p.b2 + h;
        for j in 0..p.hidden_dim() {
            let mut z1 = p.b1[j];
            for k in 0..p.in_dim() {
                z1 += p.w1.get(j, k) * x[k];
            }
            z2 += p.w2[j] * if z1 > 0.0 { z1 } else { 0.0 };
        }
        match kind {
            OutputKind::Sigmoid => 1.0 / (1.0 + (-z2).exp()),
            OutputKind::Linear => z2,
        }
    }

    #[test]
    fn forward_matches_reimplementation() {
        let mut rng = Rng::new(11);
        for trial in 0..20 {
            let p = rand_params(5, 7, 100 + trial);
            let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let h = rng.normal();
            for kind in [OutputKind::Sigmoid, OutputKind::Linear] {
                let (out, _) = mlp_forward(&p, &x, h, kind).unwrap();
                assert!((out - forward_oracle(&p, &x, h, kind)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let p = MlpParams::zeros(4, 8);
        assert!(mlp_forward(&p, &[1.0; 3], 0.0, OutputKind::Sigmoid).is_err());
    }

    #[test]
    fn backward_zero_upstream_zero_grad() {
        let p = rand_params(3, 5, 1);
        let (_, cache) = mlp_forward(&p, &[0.5, -0.2, 1.0], 0.3, OutputKind::Sigmoid).unwrap();
        let g = mlp_backward(&p, &cache, 0.0).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        assert_eq!(g.bias_offset, 0.0);
    }

    #[test]
    fn backward_stale_cache_rejected() {
        let p = rand_params(3, 5, 1);
        let (_, cache) = mlp_forward(&p, &[0.5, -0.2, 1.0], 0.0, OutputKind::Sigmoid).unwrap();
        let other = rand_params(4, 5, 2);
        assert!(mlp_backward(&other, &cache, 1.0).is_err());
    }

    #[test]
    fn backward_matches_hand_derivation_single_unit() {
        // 1 hidden unit: out = sigmoid(w2 * relu(w1*x + b1) + b2 + h).
        // Hand chain rule for x=2, w1=0.5, b1=0.1, w2=-0.7, b2=0.2, h=0.3:
        //   z1 = 1.1 (positive), a1 = 1.1, z2 = 0.2 + 0.3 - 0.77 = -0.27
        //   s = sigmoid(-0.27); ds/dz2 = s(1-s)
        //   dL/dout = 1 (identity upstream)
        //   d_b2 = d_h = s(1-s); d_w2 = s(1-s)*1.1
        //   d_b1 = s(1-s)*(-0.7); d_w1 = s(1-s)*(-0.7)*2
        let p = MlpParams {
            w1: Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            b1: vec![0.1],
            w2: vec![-0.7],
            b2: 0.2,
        };
        let (out, cache) = mlp_forward(&p, &[2.0], 0.3, OutputKind::Sigmoid).unwrap();
        let s = 1.0 / (1.0 + (0.27f64).exp());
        assert!((out - s).abs() < 1e-15);
        let g = mlp_backward(&p, &cache, 1.0).unwrap();
        let sp = s * (1.0 - s);
        assert!((g.params.b2 - sp).abs() < 1e-12);
        assert!((g.bias_offset - sp).abs() < 1e-12);
        assert!((g.params.w2[0] - sp * 1.1).abs() < 1e-12);
        assert!((g.params.b1[0] - sp * -0.7).abs() < 1e-12);
        assert!((g.params.w1.get(0, 0) - sp * -0.7 * 2.0).abs() < 1e-12);
    }

    /// Central finite differences of the composite loss, the independent
    /// oracle for the analytic gradient.
    fn fd_check(p: &MlpParams, x: &[f64], h: f64, y: f64, kind: OutputKind) -> f64 {
        let loss = |p: &MlpParams, h: f64| {
            let (out, _) = mlp_forward(p, x, h, kind).unwrap();
            match kind {
                OutputKind::Sigmoid => bce_loss(out, y),
                OutputKind::Linear => mse_loss(out, y),
            }
        };
        let (out, cache) = mlp_forward(p, x, h, kind).unwrap();
        let upstream = match kind {
            OutputKind::Sigmoid => {
                let pc = out.clamp(1e-7, 1.0 - 1e-7);
                -y / pc + (1.0 - y) / (1.0 - pc)
            }
            OutputKind::Linear => 2.0 * (out - y),
        };
        let g = mlp_backward(p, &cache, upstream).unwrap();
        let analytic = {
            let mut v = g.params.flatten();
            v.push(g.bias_offset);
            v
        };
        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        let flat = p.flatten();
        let dims = (p.in_dim(), p.hidden_dim());
        for i in 0..=flat.len() {
            let (lo, hi) = if i < flat.len() {
                let mut fp = flat.clone();
                fp[i] += step;
                let hi = loss(&MlpParams::from_flat(dims.0, dims.1, &fp).unwrap(), h);
                fp[i] -= 2.0 * step;
                let lo = loss(&MlpParams::from_flat(dims.0, dims.1, &fp).unwrap(), h);
                (lo, hi)
            } else {
                (loss(p, h - step), loss(p, h + step))
            };
            let fd = (hi - lo) / (2.0 * step);
            let a = analytic[i];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(97);
        for trial in 0..30 {
            let p = rand_params(4, 6, 500 + trial);
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let h = 0.5 * rng.normal();
            let y = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            let kind = if trial % 2 == 0 {
                OutputKind::Sigmoid
            } else {
                OutputKind::Linear
            };
            let y = if kind == OutputKind::Linear { y + rng.normal() } else { y };
            let rel = fd_check(&p, &x, h, y, kind);
            assert!(rel < 1e-4, "trial {trial}: max relative error {rel}");
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-7, 1.0) < 1.1e-7);
        assert!((bce_loss(0.2, 0.0) - (-(0.8f64).ln())).abs() < 1e-12);
        // clamping keeps the loss finite at the boundary
        assert!(bce_loss(0.0, 1.0).is_finite());
        assert!(bce_loss(1.0, 0.0).is_finite());
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut p = rand_params(3, 4, 9);
        let before = p.clone();
        sgd_step(&mut p, &MlpParams::zeros(3, 4), 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_constant_gradient() {
        let mut p = MlpParams::zeros(2, 3);
        let mut g = MlpParams::zeros(2, 3);
        for v in g.w1.data_mut() {
            *v = 1.0;
        }
        g.b1.iter_mut().for_each(|v| *v = 1.0);
        g.w2.iter_mut().for_each(|v| *v = 1.0);
        g.b2 = 1.0;
        sgd_step(&mut p, &g, 0.001).unwrap();
        assert!(p.flatten().iter().all(|&v| (v + 0.001).abs() < 1e-15));
    }

    #[test]
    fn sgd_two_steps_sum_like_one() {
        let g1 = rand_params(3, 4, 21);
        let g2 = rand_params(3, 4, 22);
        let mut p_two = MlpParams::zeros(3, 4);
        sgd_step(&mut p_two, &g1, 0.01).unwrap();
        sgd_step(&mut p_two, &g2, 0.01).unwrap();
        let mut summed = g1.clone();
        summed.add_scaled(&g2, 1.0).unwrap();
        let mut p_one = MlpParams::zeros(3, 4);
        sgd_step(&mut p_one, &summed, 0.01).unwrap();
        for (a, b) in p_two.flatten().iter().zip(p_one.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = MlpParams::zeros(2, 2);
        let mut g = MlpParams::zeros(2, 2);
        g.w2[1] = f64::NAN;
        // flat order: w1 (4 entries), b1 (2), w2 (2), b2 -> w2[1] is index 7
        let err = sgd_step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains('7'), "unexpected message: {err}");
    }

    #[test]
    fn accumulate_matches_allocating_backward() {
        let p = rand_params(5, 6, 40);
        let mut rng = Rng::new(41);
        let mut acc = MlpParams::zeros(5, 6);
        let mut expect = MlpParams::zeros(5, 6);
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let (_, cache) = mlp_forward(&p, &x, 0.2, OutputKind::Sigmoid).unwrap();
            let d = rng.normal();
            mlp_backward_logit_into(&p, &cache, d, &mut acc).unwrap();
            let g = mlp_backward_logit(&p, &cache, d).unwrap();
            expect.add_scaled(&g.params, 1.0).unwrap();
        }
        for (a, b) in acc.flatten().iter().zip(expect.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_roundtrip_identity() {
        let p = rand_params(7, 3, 33);
        let q = MlpParams::from_flat(7, 3, &p.flatten()).unwrap();
        assert_eq!(p, q);
    }
}
