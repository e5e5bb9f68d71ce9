//! Dense tensors and a small feed-forward network with hand-derived gradients.
//!
//! Everything here is `f64` and allocation-light. Layers compute
//! `y = activation(W x + b)` with `W` stored row-major as `(out_dim, in_dim)`.
//! The forward pass returns a [`ForwardCache`] that the backward pass consumes;
//! there is no tape and no global state, so parameter snapshots can be shared
//! freely between threads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("loss is not finite (perturbing parameter {index})")]
    NonFiniteLoss { index: usize },
    #[error("forward cache does not match these parameters: {0}")]
    StaleCache(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(NnError::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        check_len("tensor values", rows * cols, values.len())?;
        Ok(Self { rows, cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(rows, cols);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("std is positive and finite");
            for v in &mut t.values {
                *v = normal.sample(rng);
            }
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `out = self * x`. Panics on shape mismatch; callers validate first.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `out = self^T * y`.
    pub fn matvec_transpose_into(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
    }

    /// `self += scale * a ⊗ b`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor2D, scale: f64) -> Result<()> {
        check_len("tensor rows", self.rows, other.rows)?;
        check_len("tensor cols", self.cols, other.cols)?;
        axpy(&mut self.values, scale, &other.values);
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, evaluated in
/// logit space so the loss stays finite for saturated logits.
///
/// Returns `(loss, d loss / d logit)`.
#[inline]
pub fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    // -[r ln σ(z) + (1-r) ln(1-σ(z))] = softplus(z) - r z
    let loss = softplus(logit) - label * logit;
    (loss, sigmoid(logit) - label)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Negative log-likelihood of `class` under `softmax(logits)`.
///
/// Returns `(loss, d loss / d logits)`.
pub fn softmax_nll(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[class];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[class] -= 1.0;
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative given the pre-activation `z` and post-activation `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor2D, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_len("layer bias", weight.rows(), bias.len())?;
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Gradient of one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

/// Gradients for every layer of an [`MlpParams`], shape-matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Tensor2D::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum()
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) -> Result<()> {
        check_len("gradient layers", self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, scale)?;
            check_len("bias gradient", a.bias.len(), b.bias.len())?;
            axpy(&mut a.bias, scale, &b.bias);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.values_mut().iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Layer-major flattening: each layer's weights then its biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        self.extend_flat(&mut out);
        out
    }

    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.values());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`MlpGrads::extend_flat`]; returns the number of values consumed.
    pub fn read_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let needed = self.num_values();
        if flat.len() < needed {
            return Err(NnError::DimensionMismatch {
                what: "flat gradient",
                expected: needed,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.values().len();
            l.weight.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(off)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer activations retained by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[k]` is the input fed to layer `k`.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn post_activations(&self, layer: usize) -> &[f64] {
        &self.post[layer]
    }
}

/// A stack of dense layers with chained dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidConfig("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            check_len("chained layer dims", w[0].out_dim(), w[1].in_dim())?;
        }
        for l in &layers {
            check_len("layer bias", l.out_dim(), l.bias.len())?;
        }
        Ok(Self { layers })
    }

    /// Zero-initialised network with layer sizes `dims[0] -> dims[1] -> ...`.
    /// Every layer uses `hidden` except the last, which uses `output`.
    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        Self::build(dims, hidden, output, |r, c| Tensor2D::zeros(r, c))
    }

    /// Weights drawn from `N(0, weight_std^2)`, biases zero.
    pub fn gaussian<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        weight_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(dims, hidden, output, |r, c| {
            Tensor2D::gaussian(r, c, weight_std, rng)
        })
    }

    /// Weights drawn from `N(0, gain / fan_in)`.
    pub fn fan_in_gaussian<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(dims, hidden, output, |r, c| {
            Tensor2D::gaussian(r, c, (gain / c as f64).sqrt(), rng)
        })
    }

    fn build(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        mut weight: impl FnMut(usize, usize) -> Tensor2D,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(NnError::InvalidConfig(
                "need at least input and output dimensions".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidConfig("layer dimensions must be > 0".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| DenseLayer {
                weight: weight(dims[k + 1], dims[k]),
                bias: vec![0.0; dims[k + 1]],
                activation: if k + 1 == n { output } else { hidden },
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_len("network input", self.input_dim(), input.len())?;
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = vec![0.0; layer.out_dim()];
            layer.weight.matvec_into(&x, &mut z);
            axpy(&mut z, 1.0, &layer.bias);
            let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            cache.inputs.push(std::mem::replace(&mut x, a.clone()));
            cache.pre.push(z);
            cache.post.push(a);
        }
        Ok((x, cache))
    }

    /// Forward pass without retaining activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_dim(), input.len())?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = vec![0.0; layer.out_dim()];
            layer.weight.matvec_into(&x, &mut z);
            for (zi, (b, act)) in z.iter_mut().zip(layer.bias.iter().map(|b| (b, layer.activation))) {
                *zi = act.apply(*zi + b);
            }
            x = z;
        }
        Ok(x)
    }

    /// Back-propagates `upstream = d loss / d output` through the cached
    /// forward pass. Returns parameter gradients and `d loss / d input`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let input_grad = self.backward_accumulate(cache, upstream, 1.0, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`MlpParams::backward`] but adds `scale * gradient` into `grads`.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        scale: f64,
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        self.validate_cache(cache)?;
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        check_len("gradient layers", self.layers.len(), grads.layers.len())?;
        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[k];
            let post = &cache.post[k];
            for (d, (&z, &a)) in delta.iter_mut().zip(pre.iter().zip(post)) {
                *d *= layer.activation.derivative(z, a);
            }
            let g = &mut grads.layers[k];
            g.weight.add_outer(scale, &delta, &cache.inputs[k]);
            axpy(&mut g.bias, scale, &delta);
            let mut below = vec![0.0; layer.in_dim()];
            layer.weight.matvec_transpose_into(&delta, &mut below);
            delta = below;
        }
        Ok(delta)
    }

    fn validate_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.pre.len() != self.layers.len() {
            return Err(NnError::StaleCache(format!(
                "cache has {} layers, network has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if cache.inputs[k].len() != layer.in_dim()
                || cache.pre[k].len() != layer.out_dim()
                || cache.post[k].len() != layer.out_dim()
            {
                return Err(NnError::StaleCache(format!("layer {k} shape differs")));
            }
        }
        Ok(())
    }

    /// `params -= lr * grads`.
    pub fn sgd_apply(&mut self, grads: &MlpGrads, lr: f64) -> Result<()> {
        check_len("gradient layers", self.layers.len(), grads.layers.len())?;
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            check_len("weight gradient", l.weight.values().len(), g.weight.values().len())?;
            check_len("bias gradient", l.bias.len(), g.bias.len())?;
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight.add_scaled(&g.weight, -lr)?;
            axpy(&mut l.bias, -lr, &g.bias);
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.extend_flat(&mut out);
        out
    }

    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.values());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrites parameters from a layer-major flat slice; returns values consumed.
    pub fn read_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let needed = self.num_params();
        if flat.len() < needed {
            return Err(NnError::DimensionMismatch {
                what: "flat parameters",
                expected: needed,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.values().len();
            l.weight.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(off)
    }
}

/// Central finite-difference gradient check over a flat parameter vector.
///
/// `loss_and_grad` returns the loss and the analytic gradient at a point.
/// The result is `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
pub fn finite_diff_check<F>(params: &[f64], loss_and_grad: F, step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(NnError::InvalidStep(step));
    }
    let (loss, analytic) = loss_and_grad(params);
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss { index: usize::MAX });
    }
    check_len("analytic gradient", params.len(), analytic.len())?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let (plus, _) = loss_and_grad(&probe);
        probe[i] = orig - step;
        let (minus, _) = loss_and_grad(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NnError::NonFiniteLoss { index: i });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Adam optimiser over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hand_net() -> MlpParams {
        // 2-2-1, sigmoid hidden, linear output.
        let l1 = DenseLayer::new(
            Tensor2D::from_vec(2, 2, vec![0.5, -1.0, 1.5, 0.25]).unwrap(),
            vec![0.1, -0.2],
            Activation::Sigmoid,
        )
        .unwrap();
        let l2 = DenseLayer::new(
            Tensor2D::from_vec(1, 2, vec![2.0, -0.5]).unwrap(),
            vec![0.3],
            Activation::Linear,
        )
        .unwrap();
        MlpParams::new(vec![l1, l2]).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpParams::zeros(&[3, 4, 2], Activation::Relu, Activation::Linear).unwrap();
        let (out, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let l = DenseLayer::new(Tensor2D::identity(3), vec![0.0; 3], Activation::Linear).unwrap();
        let net = MlpParams::new(vec![l]).unwrap();
        let x = [0.3, -1.2, 7.0];
        assert_eq!(net.forward(&x).unwrap().0, x.to_vec());
    }

    #[test]
    fn hand_evaluated_forward() {
        // x = (1, 2)
        // z1 = 0.5*1 - 1*2 + 0.1 = -1.4 ; z2 = 1.5*1 + 0.25*2 - 0.2 = 1.8
        // a = (σ(-1.4), σ(1.8)) = (0.19781611144141825, 0.8581489350995123)
        // y = 2*a1 - 0.5*a2 + 0.3, evaluated independently offline.
        let expected = 0.266_557_755_333_080_35;
        let (out, _) = hand_net().forward(&[1.0, 2.0]).unwrap();
        assert!((out[0] - expected).abs() < 1e-9, "{} vs {}", out[0], expected);
    }

    #[test]
    fn forward_rejects_wrong_input_len() {
        let err = hand_net().forward(&[1.0]).unwrap_err();
        assert!(matches!(err, NnError::DimensionMismatch { .. }));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = hand_net();
        let (_, cache) = net.forward(&[0.4, -0.7]).unwrap();
        let (g, dx) = net.backward(&cache, &[0.0]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_weight_grad_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::gaussian(&[3, 2], Activation::Linear, Activation::Linear, 1.0, &mut rng)
            .unwrap();
        let x = [1.0, -2.0, 0.5];
        let g = [0.7, -1.1];
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &g).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((grads.layers[0].weight.get(r, c) - g[r] * x[c]).abs() < 1e-15);
            }
        }
        assert_eq!(grads.layers[0].bias, g.to_vec());
    }

    #[test]
    fn stale_cache_rejected() {
        let net = hand_net();
        let other = MlpParams::zeros(&[2, 3, 1], Activation::Relu, Activation::Linear).unwrap();
        let (_, cache) = other.forward(&[1.0, 1.0]).unwrap();
        assert!(matches!(net.backward(&cache, &[1.0]), Err(NnError::StaleCache(_))));
    }

    fn net_loss(net: &MlpParams, x: &[f64], flat: &[f64]) -> (f64, Vec<f64>) {
        let mut n = net.clone();
        n.read_flat(flat).unwrap();
        let (out, cache) = n.forward(x).unwrap();
        let loss: f64 = out.iter().map(|v| 0.5 * v * v).sum();
        let (g, _) = n.backward(&cache, &out).unwrap();
        (loss, g.to_flat())
    }

    #[test]
    fn sigmoid_network_matches_finite_differences() {
        let net = hand_net();
        let x = [1.0, 2.0];
        let err = finite_diff_check(&net.to_flat(), |p| net_loss(&net, &x, p), 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn quadratic_linear_layer_is_tight() {
        let l = DenseLayer::new(
            Tensor2D::from_vec(2, 2, vec![1.0, 2.0, -0.5, 0.25]).unwrap(),
            vec![0.1, 0.2],
            Activation::Linear,
        )
        .unwrap();
        let net = MlpParams::new(vec![l]).unwrap();
        let x = [0.3, -0.9];
        let err = finite_diff_check(&net.to_flat(), |p| net_loss(&net, &x, p), 1e-4).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn random_three_layer_relu_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = MlpParams::gaussian(&[4, 5, 3, 2], Activation::Relu, Activation::Sigmoid, 0.8, &mut rng)
            .unwrap();
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|_| Tensor2D::gaussian(1, 4, 1.0, &mut rng).values().to_vec())
            .collect();
        let loss = |p: &[f64]| {
            let mut total = 0.0;
            let mut grad = vec![0.0; p.len()];
            for x in &batch {
                let (l, g) = net_loss(&net, x, p);
                total += l;
                axpy(&mut grad, 1.0, &g);
            }
            (total, grad)
        };
        let err = finite_diff_check(&net.to_flat(), loss, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn zero_step_rejected() {
        let r = finite_diff_check(&[1.0], |p| (p[0] * p[0], vec![2.0 * p[0]]), 0.0);
        assert_eq!(r, Err(NnError::InvalidStep(0.0)));
    }

    #[test]
    fn non_finite_loss_reported() {
        let r = finite_diff_check(&[1.0], |p| (p[0].ln() / 0.0, vec![0.0]), 1e-3);
        assert!(matches!(r, Err(NnError::NonFiniteLoss { .. })));
    }

    #[test]
    fn sgd_step_cases() {
        let l = DenseLayer::new(Tensor2D::from_vec(1, 1, vec![1.0]).unwrap(), vec![0.0], Activation::Linear)
            .unwrap();
        let mut net = MlpParams::new(vec![l]).unwrap();
        let mut g = MlpGrads::zeros_like(&net);
        g.layers[0].weight.set(0, 0, 0.5);

        let before = net.clone();
        net.sgd_apply(&g, 0.0).unwrap();
        assert_eq!(net, before);
        net.sgd_apply(&MlpGrads::zeros_like(&net), 0.3).unwrap();
        assert_eq!(net, before);

        net.sgd_apply(&g, 0.01).unwrap();
        assert!((net.layers[0].weight.get(0, 0) - 0.995).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut net = MlpParams::zeros(&[2, 2], Activation::Linear, Activation::Linear).unwrap();
        let other = MlpParams::zeros(&[3, 2], Activation::Linear, Activation::Linear).unwrap();
        assert!(net.sgd_apply(&MlpGrads::zeros_like(&other), 0.1).is_err());
    }

    #[test]
    fn bce_is_finite_when_saturated() {
        let (l, g) = bce_with_logit(-800.0, 1.0);
        assert!(l.is_finite() && (l - 800.0).abs() < 1e-9);
        assert!((g + 1.0).abs() < 1e-12);
        let (l, _) = bce_with_logit(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_nll_of_uniform_is_ln_c() {
        let (l, g) = softmax_nll(&[0.3, 0.3, 0.3], 2);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpParams::gaussian(&[6, 8, 4], Activation::Relu, Activation::Sigmoid, 1.0, &mut rng)
            .unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let a = net.forward(&x).unwrap().0;
        let b = net.forward(&x).unwrap().0;
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(net.predict(&x).unwrap(), a);
    }
}
