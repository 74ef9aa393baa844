//! All-layer margin `m(F, x, y) = min ‖δ‖ s.t. argmax F(x, δ) ≠ y` and its
//! robust variant over an input ball.
//!
//! The search is a penalty method on `‖δ‖² + λ·max(0, γ + slack)` with λ
//! doubling each stage, run from several starts. Every feasible iterate is
//! then polished by projecting onto the linearized decision boundary and by
//! bisection along the ray to the origin.

use super::{backward, gamma_and_runner_up, trace_unchecked, FeedforwardNet, PerturbationVector};
use crate::dataspace::TransformSpec;
use crate::error::{LabError, Result};
use crate::linalg::{argmax, axpy, dot, norm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginOptions {
    pub restarts: usize,
    pub steps_per_stage: usize,
    pub penalty_start: f64,
    pub penalty_stages: usize,
    /// Adam step size relative to the last-layer margin estimate.
    pub step_size: f64,
    pub margin_slack: f64,
    pub polish_iters: usize,
    pub seed: u64,
}

impl Default for MarginOptions {
    fn default() -> Self {
        MarginOptions {
            restarts: 5,
            steps_per_stage: 300,
            penalty_start: 1.0,
            penalty_stages: 11,
            step_size: 0.05,
            margin_slack: 1e-6,
            polish_iters: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    #[serde(with = "crate::expansion::finite_or_null")]
    pub value: f64,
    pub minimizer: Option<PerturbationVector>,
    /// Input point used, for the robust margin.
    pub input: Option<Vec<f64>>,
    pub converged: bool,
    pub lower_bound: Option<f64>,
    pub restarts: usize,
}

/// `γ(z, y) = z_y − max_{j≠y} z_j`.
pub fn gamma(z: &[f64], y: usize) -> f64 {
    gamma_and_runner_up(z, y).0
}

fn misclassifies(net: &FeedforwardNet, x: &[f64], d: &PerturbationVector, y: usize) -> bool {
    argmax(trace_unchecked(net, x, Some(d)).logits()) != y
}

fn check(net: &FeedforwardNet, x: &[f64], y: usize) -> Result<()> {
    net.check_input(x)?;
    if y >= net.num_classes() {
        return Err(LabError::InvalidArgument(format!("label {y} outside the net's {} classes", net.num_classes())));
    }
    if net.num_classes() < 2 {
        return Err(LabError::InvalidArgument("margins need at least two classes".into()));
    }
    Ok(())
}

struct Best {
    value: f64,
    delta: Option<PerturbationVector>,
}

impl Best {
    fn offer(&mut self, net: &FeedforwardNet, x: &[f64], y: usize, d: &PerturbationVector) -> bool {
        let n = d.norm();
        if n < self.value && misclassifies(net, x, d, y) {
            self.value = n;
            self.delta = Some(d.clone());
            true
        } else {
            false
        }
    }
}

/// Gradient of `z_j − z_y` with respect to δ, and its value.
fn boundary_gradient(
    net: &FeedforwardNet,
    x: &[f64],
    d: &PerturbationVector,
    y: usize,
    j: usize,
) -> (f64, PerturbationVector) {
    let tr = trace_unchecked(net, x, Some(d));
    let z = tr.logits();
    let mut g = vec![0.0; z.len()];
    g[j] = 1.0;
    g[y] = -1.0;
    let value = z[j] - z[y];
    let back = backward(net, &tr, &g, 1.0, None);
    (value, back.delta.expect("perturbed trace"))
}

/// Newton-type projections onto `{δ : z_j(δ) − z_y(δ) = ε}`, starting at `d`.
fn project_to_boundary(
    net: &FeedforwardNet,
    x: &[f64],
    y: usize,
    j: usize,
    start: &PerturbationVector,
    iters: usize,
    best: &mut Best,
) {
    let mut d = start.clone();
    for _ in 0..iters {
        let (value, g) = boundary_gradient(net, x, &d, y, j);
        let gg = g.norm_sq();
        if !(gg > 0.0) || !value.is_finite() {
            return;
        }
        let eps = 1e-10 * (1.0 + value.abs());
        let t = (eps - value + g.dot(&d)) / gg;
        let next = g.scaled(t);
        if !best.offer(net, x, y, &next) {
            // a slightly longer step usually crosses the boundary
            for s in [1.0 + 1e-9, 1.0 + 1e-6, 1.0 + 1e-4] {
                if best.offer(net, x, y, &next.scaled(s)) {
                    break;
                }
            }
        }
        let moved = (next.norm() - d.norm()).abs();
        d = next;
        if moved <= 1e-15 * (1.0 + d.norm()) {
            break;
        }
    }
}

/// Shrinks a feasible δ toward the origin by bisection on the scale.
fn shrink_along_ray(net: &FeedforwardNet, x: &[f64], y: usize, best: &mut Best) {
    let Some(d) = best.delta.clone() else { return };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if misclassifies(net, x, &d.scaled(mid), y) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    best.offer(net, x, y, &d.scaled(hi));
}

/// Penalty-method descent from `start`, recording feasible iterates.
fn penalty_descent(
    net: &FeedforwardNet,
    x: &[f64],
    y: usize,
    start: PerturbationVector,
    scale: f64,
    opt: &MarginOptions,
    best: &mut Best,
) -> PerturbationVector {
    let mut d = start;
    let mut lambda = opt.penalty_start;
    let lr = opt.step_size * scale;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-12);
    for _ in 0..opt.penalty_stages {
        let mut m = PerturbationVector { layers: d.layers.iter().map(|l| vec![0.0; l.len()]).collect() };
        let mut v = m.clone();
        for step in 1..=opt.steps_per_stage {
            let tr = trace_unchecked(net, x, Some(&d));
            let z = tr.logits();
            if argmax(z) != y {
                best.offer(net, x, y, &d);
            }
            let (gap, runner) = gamma_and_runner_up(z, y);
            let mut g = d.scaled(2.0);
            if gap + opt.margin_slack * scale > 0.0 {
                let mut dz = vec![0.0; z.len()];
                dz[y] = lambda;
                dz[runner] = -lambda;
                let back = backward(net, &tr, &dz, 1.0, None);
                g.axpy(1.0, &back.delta.expect("perturbed trace"));
            }
            let t = step as i32;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let mut moved = 0.0;
            for ((dl, gl), (ml, vl)) in
                d.layers.iter_mut().zip(&g.layers).zip(m.layers.iter_mut().zip(v.layers.iter_mut()))
            {
                for k in 0..dl.len() {
                    ml[k] = b1 * ml[k] + (1.0 - b1) * gl[k];
                    vl[k] = b2 * vl[k] + (1.0 - b2) * gl[k] * gl[k];
                    let upd = lr * (ml[k] / c1) / ((vl[k] / c2).sqrt() + eps);
                    dl[k] -= upd;
                    moved += upd * upd;
                }
            }
            if moved.sqrt() < 1e-13 * scale {
                break;
            }
        }
        lambda *= 2.0;
    }
    d
}

/// Last-layer perturbation that moves logit `j` level with logit `y`.
fn last_layer_start(net: &FeedforwardNet, x: &[f64], y: usize, j: usize) -> PerturbationVector {
    let tr = trace_unchecked(net, x, Some(&PerturbationVector::zeros(net)));
    let z = tr.logits();
    let p = net.depth();
    let s = *tr.norms.last().unwrap();
    let gap = (z[y] - z[j]).max(0.0);
    let mut d = PerturbationVector::zeros(net);
    if s > 0.0 {
        let t = gap / (2.0 * s) * (1.0 + 1e-9) + 1e-12;
        d.layers[p - 1][j] = t;
        d.layers[p - 1][y] = -t;
    }
    d
}

/// All-layer margin of `(x, y)`. Exactly 0 when `x` is already misclassified.
pub fn all_layer_margin(net: &FeedforwardNet, x: &[f64], y: usize, opt: &MarginOptions) -> Result<MarginReport> {
    check(net, x, y)?;
    Ok(margin_unchecked(net, x, y, opt, &[]))
}

pub(crate) fn margin_unchecked(
    net: &FeedforwardNet,
    x: &[f64],
    y: usize,
    opt: &MarginOptions,
    extra_starts: &[PerturbationVector],
) -> MarginReport {
    let zero = PerturbationVector::zeros(net);
    let z = trace_unchecked(net, x, Some(&zero)).logits().to_vec();
    if argmax(&z) != y {
        return MarginReport {
            value: 0.0,
            minimizer: Some(zero),
            input: None,
            converged: true,
            lower_bound: None,
            restarts: 0,
        };
    }
    let (_, runner) = gamma_and_runner_up(&z, y);
    let mut best = Best { value: f64::INFINITY, delta: None };
    let first = last_layer_start(net, x, y, runner);
    let scale = first.norm().max(1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x6d61_7267);
    let width: usize = net.dims()[1..].iter().sum();
    let mut ends = Vec::new();
    for r in 0..opt.restarts.max(1) {
        let start = if r == 0 {
            first.clone()
        } else {
            let sd = scale / (width as f64).sqrt();
            PerturbationVector {
                layers: net.dims()[1..]
                    .iter()
                    .map(|&w| (0..w).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect(),
            }
        };
        best.offer(net, x, y, &start);
        ends.push(penalty_descent(net, x, y, start, scale, opt, &mut best));
    }
    // polish: boundary projections from the origin, from every restart's end
    // point and from the incumbent
    for j in (0..net.num_classes()).filter(|&j| j != y) {
        project_to_boundary(net, x, y, j, &zero, opt.polish_iters, &mut best);
        project_to_boundary(net, x, y, j, &last_layer_start(net, x, y, j), opt.polish_iters, &mut best);
    }
    for s in ends.iter().chain(extra_starts) {
        best.offer(net, x, y, s);
        let zs = trace_unchecked(net, x, Some(s)).logits().to_vec();
        let j = flip_class(&zs, y);
        project_to_boundary(net, x, y, j, s, opt.polish_iters, &mut best);
    }
    if let Some(d) = best.delta.clone() {
        let zs = trace_unchecked(net, x, Some(&d)).logits().to_vec();
        project_to_boundary(net, x, y, flip_class(&zs, y), &d, opt.polish_iters, &mut best);
    }
    shrink_along_ray(net, x, y, &mut best);
    MarginReport {
        value: best.value,
        converged: best.delta.is_some(),
        minimizer: best.delta,
        input: None,
        lower_bound: None,
        restarts: opt.restarts.max(1),
    }
}

/// The competing class nearest to overtaking (or already overtaking) `y`.
fn flip_class(z: &[f64], y: usize) -> usize {
    gamma_and_runner_up(z, y).1
}

/// Robust all-layer margin over the ℓ2 ball of radius `r` around `x`, for
/// the label the net assigns to `x`.
pub fn robust_all_layer_margin(net: &FeedforwardNet, x: &[f64], r: f64, opt: &MarginOptions) -> Result<MarginReport> {
    net.check_input(x)?;
    if !(r >= 0.0) {
        return Err(LabError::InvalidArgument("radius must be >= 0".into()));
    }
    let y = argmax(&super::forward(net, x)?);
    check(net, x, y)?;
    Ok(robust_at(net, x, r, y, opt))
}

/// Minimum of the robust margin over the augmented centers `T(x)`.
pub fn robust_all_layer_margin_augmented(
    net: &FeedforwardNet,
    x: &[f64],
    t: &TransformSpec,
    opt: &MarginOptions,
) -> Result<MarginReport> {
    t.validate(x.len())?;
    net.check_input(x)?;
    let y = argmax(&super::forward(net, x)?);
    check(net, x, y)?;
    let mut best: Option<MarginReport> = None;
    for a in &t.augmentations {
        let rep = robust_at(net, &a.apply(x), t.radius, y, opt);
        if best.as_ref().is_none_or(|b| rep.value < b.value) {
            best = Some(rep);
        }
    }
    Ok(best.expect("augmentation set is nonempty"))
}

fn project_ball(center: &[f64], r: f64, p: &mut [f64]) {
    let mut diff: Vec<f64> = p.iter().zip(center).map(|(a, b)| a - b).collect();
    let n = norm(&diff);
    if n > r {
        diff.iter_mut().for_each(|v| *v *= r / n);
        for ((pi, ci), di) in p.iter_mut().zip(center).zip(&diff) {
            *pi = ci + di;
        }
    }
}

fn robust_at(net: &FeedforwardNet, x: &[f64], r: f64, y: usize, opt: &MarginOptions) -> MarginReport {
    let center = margin_unchecked(net, x, y, opt, &[]);
    if r == 0.0 || center.value == 0.0 {
        return MarginReport { input: Some(x.to_vec()), ..center };
    }
    let zero = PerturbationVector::zeros(net);
    // phase 1: look for an input in the ball that flips the prediction
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for j in (0..net.num_classes()).filter(|&j| j != y) {
        let mut p = x.to_vec();
        for _ in 0..opt.polish_iters.max(10) {
            let tr = trace_unchecked(net, &p, Some(&zero));
            let z = tr.logits();
            if argmax(z) != y {
                return MarginReport {
                    value: 0.0,
                    minimizer: Some(zero),
                    input: Some(p),
                    converged: true,
                    lower_bound: None,
                    restarts: center.restarts,
                };
            }
            let mut dz = vec![0.0; z.len()];
            dz[y] = 1.0;
            dz[j] = -1.0;
            let g = backward(net, &tr, &dz, 1.0, None).input;
            let gg = dot(&g, &g);
            if !(gg > 0.0) {
                break;
            }
            let gap = z[y] - z[j];
            axpy(&mut p, -(gap + 1e-10 * (1.0 + gap.abs())) / gg, &g);
            project_ball(x, r, &mut p);
        }
        candidates.push(p);
    }
    // phase 2: joint penalty descent over (x', δ)
    let mut best_value = center.value;
    let mut best_delta = center.minimizer.clone();
    let mut best_input = x.to_vec();
    let scale = if center.value.is_finite() { center.value.max(1e-8) } else { 1.0 };
    for start in &candidates {
        let (p, d) = joint_descent(net, x, r, y, start.clone(), scale, opt);
        for point in [start.clone(), p] {
            let rep = margin_unchecked(
                net,
                &point,
                y,
                &MarginOptions { restarts: 1, ..opt.clone() },
                std::slice::from_ref(&d),
            );
            if rep.value < best_value {
                best_value = rep.value;
                best_delta = rep.minimizer;
                best_input = point;
            }
        }
    }
    MarginReport {
        value: best_value,
        converged: best_delta.is_some(),
        minimizer: best_delta,
        input: Some(best_input),
        lower_bound: None,
        restarts: center.restarts,
    }
}

fn joint_descent(
    net: &FeedforwardNet,
    center: &[f64],
    r: f64,
    y: usize,
    mut p: Vec<f64>,
    scale: f64,
    opt: &MarginOptions,
) -> (Vec<f64>, PerturbationVector) {
    let mut d = PerturbationVector::zeros(net);
    let mut lambda = opt.penalty_start;
    let lr_d = opt.step_size * scale;
    let lr_x = opt.step_size * r.max(1e-12);
    let stages = opt.penalty_stages.min(6);
    let steps = opt.steps_per_stage.min(100);
    for _ in 0..stages {
        for _ in 0..steps {
            let tr = trace_unchecked(net, &p, Some(&d));
            let z = tr.logits();
            let (gap, runner) = gamma_and_runner_up(z, y);
            let mut gd = d.scaled(2.0);
            if gap + opt.margin_slack * scale > 0.0 {
                let mut dz = vec![0.0; z.len()];
                dz[y] = lambda;
                dz[runner] = -lambda;
                let back = backward(net, &tr, &dz, 1.0, None);
                gd.axpy(1.0, &back.delta.expect("perturbed trace"));
                let gx = back.input;
                let nx = norm(&gx);
                if nx > 0.0 {
                    axpy(&mut p, -lr_x / nx, &gx);
                    project_ball(center, r, &mut p);
                }
            }
            let ng = gd.norm();
            if ng > 0.0 {
                d.axpy(-lr_d / ng, &gd);
            }
        }
        lambda *= 2.0;
    }
    (p, d)
}
