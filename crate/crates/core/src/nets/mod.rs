//! Feedforward networks `F(x) = W_p φ(⋯φ(W_1 x))`, the layer-perturbed
//! forward pass, and exact reverse-mode gradients.
//!
//! The perturbed pass is `h_1 = W_1 x + δ_1‖x‖`,
//! `h_i = W_i φ(h_{i−1}) + δ_i‖h_{i−1}‖`, with logits `h_p`.

mod kappa;
mod margin;

pub use kappa::{margin_lower_bound, KappaBound, PsiTerms};
pub use margin::{
    all_layer_margin, gamma, robust_all_layer_margin, robust_all_layer_margin_augmented, MarginOptions, MarginReport,
};

use crate::error::{LabError, Result};
use crate::linalg::{argmax, axpy, dot, norm, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softplus,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Softplus => t.max(0.0) + (-t.abs()).exp().ln_1p(),
            Activation::Tanh => t.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if t >= 0.0 {
                    1.0 / (1.0 + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => {
                let th = t.tanh();
                1.0 - th * th
            }
        }
    }

    /// Lipschitz constant `κ̄` of the derivative.
    pub fn derivative_lipschitz(self) -> f64 {
        match self {
            Activation::Softplus => 0.25,
            Activation::Tanh => 4.0 / (3.0 * 3f64.sqrt()),
        }
    }
}

/// Weights `W_1..W_p` (`W_i` is `dims[i] × dims[i−1]`) and the activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNet", into = "RawNet")]
pub struct FeedforwardNet {
    dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Mat>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<RawNet> for FeedforwardNet {
    type Error = LabError;
    fn try_from(r: RawNet) -> Result<Self> {
        let weights = r
            .weights
            .iter()
            .map(|w| Mat::from_rows(w).ok_or_else(|| LabError::InvalidArgument("ragged weight matrix".into())))
            .collect::<Result<Vec<_>>>()?;
        let net = FeedforwardNet::new(weights, r.activation)?;
        if net.dims != r.dims {
            return Err(LabError::InvalidArgument(format!("dims {:?} disagree with weights {:?}", r.dims, net.dims)));
        }
        Ok(net)
    }
}

impl From<FeedforwardNet> for RawNet {
    fn from(n: FeedforwardNet) -> Self {
        RawNet { dims: n.dims, activation: n.activation, weights: n.weights.iter().map(Mat::to_rows).collect() }
    }
}

impl FeedforwardNet {
    pub fn new(weights: Vec<Mat>, activation: Activation) -> Result<Self> {
        if weights.is_empty() {
            return Err(LabError::InvalidArgument("a net needs at least one layer".into()));
        }
        let mut dims = vec![weights[0].cols];
        for w in &weights {
            if w.cols != *dims.last().unwrap() {
                return Err(LabError::DimensionMismatch { expected: *dims.last().unwrap(), got: w.cols });
            }
            if w.rows == 0 || w.data.iter().any(|v| !v.is_finite()) {
                return Err(LabError::InvalidArgument("empty or non-finite weight matrix".into()));
            }
            dims.push(w.rows);
        }
        Ok(FeedforwardNet { dims, activation, weights })
    }

    /// Gaussian initialization with variance `scale² / fan_in`.
    pub fn random(dims: &[usize], activation: Activation, scale: f64, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(LabError::InvalidArgument(format!("bad layer widths {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| {
                let s = scale / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
                Mat { rows: w[1], cols: w[0], data }
            })
            .collect();
        FeedforwardNet::new(weights, activation)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Mat] {
        &mut self.weights
    }

    /// Number of weight matrices `p`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Largest width among hidden and output layers.
    pub fn q_max(&self) -> usize {
        self.dims[1..].iter().copied().max().unwrap_or(0)
    }

    pub fn with_weights(&self, weights: Vec<Mat>) -> Result<Self> {
        let net = FeedforwardNet::new(weights, self.activation)?;
        if net.dims != self.dims {
            return Err(LabError::InvalidArgument("replacement weights change the architecture".into()));
        }
        Ok(net)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(LabError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }
}

/// Per-layer perturbations `δ_1..δ_p`; `δ_i` has the width of `W_i`'s output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationVector {
    pub layers: Vec<Vec<f64>>,
}

impl PerturbationVector {
    pub fn zeros(net: &FeedforwardNet) -> Self {
        PerturbationVector { layers: net.dims[1..].iter().map(|&w| vec![0.0; w]).collect() }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| dot(l, l)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        PerturbationVector { layers: self.layers.iter().map(|l| l.iter().map(|v| v * s).collect()).collect() }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.layers.iter().zip(&other.layers).map(|(a, b)| dot(a, b)).sum()
    }

    pub fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.layers.iter_mut().zip(&other.layers) {
            axpy(x, a, y);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|&v| v == 0.0)
    }

    fn check(&self, net: &FeedforwardNet) -> Result<()> {
        if self.layers.len() != net.depth() {
            return Err(LabError::DimensionMismatch { expected: net.depth(), got: self.layers.len() });
        }
        for (l, &w) in self.layers.iter().zip(&net.dims[1..]) {
            if l.len() != w {
                return Err(LabError::DimensionMismatch { expected: w, got: l.len() });
            }
        }
        Ok(())
    }
}

/// Cached intermediate values of one (possibly perturbed) forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    input: Vec<f64>,
    /// `h_1..h_p`
    pre: Vec<Vec<f64>>,
    /// `φ(h_1)..φ(h_{p−1})`
    post: Vec<Vec<f64>>,
    /// `‖x‖, ‖h_1‖, .., ‖h_{p−1}‖`, only for perturbed passes
    norms: Vec<f64>,
    delta: Option<PerturbationVector>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

pub fn trace(net: &FeedforwardNet, x: &[f64], delta: Option<&PerturbationVector>) -> Result<Trace> {
    net.check_input(x)?;
    if let Some(d) = delta {
        d.check(net)?;
    }
    Ok(trace_unchecked(net, x, delta))
}

fn trace_unchecked(net: &FeedforwardNet, x: &[f64], delta: Option<&PerturbationVector>) -> Trace {
    let p = net.depth();
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(p.saturating_sub(1));
    let mut norms = Vec::new();
    for (l, w) in net.weights.iter().enumerate() {
        let input: &[f64] = if l == 0 { x } else { &post[l - 1] };
        let mut h = w.matvec(input);
        if let Some(d) = delta {
            let prev_norm = if l == 0 { norm(x) } else { norm(&pre[l - 1]) };
            norms.push(prev_norm);
            axpy(&mut h, prev_norm, &d.layers[l]);
        }
        if l + 1 < p {
            post.push(h.iter().map(|&t| net.activation.apply(t)).collect());
        }
        pre.push(h);
    }
    Trace { input: x.to_vec(), pre, post, norms, delta: delta.cloned() }
}

pub fn forward(net: &FeedforwardNet, x: &[f64]) -> Result<Vec<f64>> {
    Ok(trace(net, x, None)?.pre.pop().unwrap())
}

pub fn perturbed_forward(net: &FeedforwardNet, x: &[f64], delta: &PerturbationVector) -> Result<Vec<f64>> {
    Ok(trace(net, x, Some(delta))?.pre.pop().unwrap())
}

/// Predicted class, ties broken toward the lowest index.
pub fn predict(net: &FeedforwardNet, x: &[f64]) -> Result<usize> {
    Ok(argmax(&forward(net, x)?))
}

/// Gradients of a scalar function of the logits, given `∂L/∂logits`.
#[derive(Clone, Debug)]
pub struct Backward {
    pub input: Vec<f64>,
    pub delta: Option<PerturbationVector>,
}

/// Reverse pass through a trace. Weight gradients are accumulated into
/// `weight_grads` (scaled by `scale`) when provided.
pub fn backward(
    net: &FeedforwardNet,
    tr: &Trace,
    d_logits: &[f64],
    scale: f64,
    mut weight_grads: Option<&mut [Mat]>,
) -> Backward {
    let p = net.depth();
    let mut gh = d_logits.to_vec();
    let mut gdelta = tr.delta.as_ref().map(|_| Vec::with_capacity(p));
    let mut gx = Vec::new();
    for l in (0..p).rev() {
        let input: &[f64] = if l == 0 { &tr.input } else { &tr.post[l - 1] };
        if let Some(g) = weight_grads.as_deref_mut() {
            g[l].add_outer(scale, &gh, input);
        }
        let mut g_norm = 0.0;
        if let (Some(d), Some(gd)) = (tr.delta.as_ref(), gdelta.as_mut()) {
            gd.push(gh.iter().map(|v| v * tr.norms[l]).collect::<Vec<f64>>());
            g_norm = dot(&d.layers[l], &gh);
        }
        let g_in = net.weights[l].matvec_t(&gh);
        let (prev, prev_norm): (&[f64], f64) = if l == 0 {
            (&tr.input, tr.norms.first().copied().unwrap_or(0.0))
        } else {
            (&tr.pre[l - 1], tr.norms.get(l).copied().unwrap_or(0.0))
        };
        let mut next: Vec<f64> =
            if l == 0 { g_in } else { g_in.iter().zip(prev).map(|(g, &h)| g * net.activation.derivative(h)).collect() };
        if g_norm != 0.0 && prev_norm > 0.0 {
            axpy(&mut next, g_norm / prev_norm, prev);
        }
        if l == 0 {
            gx = next;
        } else {
            gh = next;
        }
    }
    let delta = gdelta.map(|mut layers| {
        layers.reverse();
        PerturbationVector { layers }
    });
    Backward { input: gx, delta }
}

// ---------------------------------------------------------------------------
// Losses on logits
// ---------------------------------------------------------------------------

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Loss families supported by [`grad`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LossSpec {
    /// `−log softmax(z)_y`
    CrossEntropy,
    /// `KL(p_ref ‖ softmax(z))` with `p_ref` held fixed.
    KlToReference,
    /// Shannon entropy of `softmax(z)`.
    MinEntropy,
    /// `‖δ‖² + λ·max(0, γ(z, y) + slack)` with `γ` the multiclass margin.
    MarginPenalty {
        penalty: f64,
        slack: f64,
    },
    Constant {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    None,
    Class(usize),
    Distribution(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Example {
    pub x: Vec<f64>,
    pub target: Target,
    pub delta: Option<PerturbationVector>,
}

/// Value and `∂/∂z` of a loss at logits `z`.
pub fn loss_on_logits(loss: &LossSpec, z: &[f64], target: &Target) -> Result<(f64, Vec<f64>)> {
    let k = z.len();
    match (loss, target) {
        (LossSpec::CrossEntropy, Target::Class(y)) if *y < k => {
            let ls = log_softmax(z);
            let mut g: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
            g[*y] -= 1.0;
            Ok((-ls[*y], g))
        }
        (LossSpec::KlToReference, Target::Distribution(p)) if p.len() == k => {
            let ls = log_softmax(z);
            let q: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
            let total: f64 = p.iter().sum();
            let value = p.iter().zip(&ls).filter(|(pi, _)| **pi > 0.0).map(|(pi, lq)| pi * (pi.ln() - lq)).sum();
            let g = q.iter().zip(p).map(|(qi, pi)| total * qi - pi).collect();
            Ok((value, g))
        }
        (LossSpec::MinEntropy, _) => {
            let ls = log_softmax(z);
            let q: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
            let h: f64 = -q.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>();
            let g = q.iter().zip(&ls).map(|(qi, li)| -qi * (li + h)).collect();
            Ok((h, g))
        }
        (LossSpec::MarginPenalty { penalty, slack }, Target::Class(y)) if *y < k && k >= 2 => {
            let (gap, runner) = gamma_and_runner_up(z, *y);
            let mut g = vec![0.0; k];
            let active = gap + slack;
            if active > 0.0 {
                g[*y] = *penalty;
                g[runner] = -*penalty;
                Ok((penalty * active, g))
            } else {
                Ok((0.0, g))
            }
        }
        (LossSpec::Constant { value }, _) => Ok((*value, vec![0.0; k])),
        _ => Err(LabError::InvalidArgument(format!("target {target:?} does not fit loss {loss:?}"))),
    }
}

/// `γ(z, y) = z_y − max_{j≠y} z_j` and the maximizing `j` (lowest on ties).
pub(crate) fn gamma_and_runner_up(z: &[f64], y: usize) -> (f64, usize) {
    let mut runner = usize::MAX;
    for j in 0..z.len() {
        if j != y && (runner == usize::MAX || z[j] > z[runner]) {
            runner = j;
        }
    }
    (z[y] - z[runner], runner)
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<Mat>,
    pub inputs: Vec<Vec<f64>>,
    pub deltas: Vec<Option<PerturbationVector>>,
}

/// Batch-mean loss and its exact gradients with respect to the weights, the
/// inputs and any per-example perturbations.
pub fn grad(net: &FeedforwardNet, loss: &LossSpec, batch: &[Example]) -> Result<Gradients> {
    let mut weights: Vec<Mat> = net.weights.iter().map(|w| Mat::zeros(w.rows, w.cols)).collect();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    let mut inputs = Vec::with_capacity(batch.len());
    let mut deltas = Vec::with_capacity(batch.len());
    for ex in batch {
        let tr = trace(net, &ex.x, ex.delta.as_ref())?;
        let (value, g) = loss_on_logits(loss, tr.logits(), &ex.target)?;
        let back = backward(net, &tr, &g, scale, Some(&mut weights));
        total += value;
        inputs.push(back.input.iter().map(|v| v * scale).collect());
        let mut gd = back.delta.map(|d| d.scaled(scale));
        if let (LossSpec::MarginPenalty { .. }, Some(d)) = (loss, ex.delta.as_ref()) {
            total += d.norm_sq();
            if let Some(gd) = gd.as_mut() {
                gd.axpy(2.0 * scale, d);
            }
        }
        deltas.push(gd);
    }
    Ok(Gradients { loss: total * scale, weights, inputs, deltas })
}
