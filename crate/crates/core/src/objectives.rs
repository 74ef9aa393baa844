//! Losses, regularizers and error metrics for labelings and nets.

use crate::dataspace::{FinitePopulation, NeighborhoodGraph};
use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::nets::{backward, log_softmax, softmax, trace, FeedforwardNet, PerturbationVector};
use serde::{Deserialize, Serialize};

/// Total map from point index to class in `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLabeling", into = "RawLabeling")]
pub struct Labeling {
    assignment: Vec<usize>,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabeling {
    assignment: Vec<usize>,
    num_classes: usize,
}

impl TryFrom<RawLabeling> for Labeling {
    type Error = LabError;
    fn try_from(r: RawLabeling) -> Result<Self> {
        Labeling::new(r.assignment, r.num_classes)
    }
}

impl From<Labeling> for RawLabeling {
    fn from(l: Labeling) -> Self {
        RawLabeling { assignment: l.assignment, num_classes: l.num_classes }
    }
}

impl Labeling {
    pub fn new(assignment: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(LabError::InvalidArgument("a labeling needs at least one class".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= num_classes) {
            return Err(LabError::IndexOutOfRange { index: bad, len: num_classes });
        }
        Ok(Labeling { assignment, num_classes })
    }

    pub fn ground_truth(pop: &FinitePopulation) -> Self {
        Labeling { assignment: pop.labels().to_vec(), num_classes: pop.num_classes() }
    }

    pub fn constant(n: usize, num_classes: usize, class: usize) -> Result<Self> {
        Labeling::new(vec![class; n], num_classes)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn get(&self, i: usize) -> usize {
        self.assignment[i]
    }

    /// Mass assigned to each class under `masses`.
    pub fn class_masses(&self, masses: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for (&c, &m) in self.assignment.iter().zip(masses) {
            out[c] += m;
        }
        out
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(LabError::DimensionMismatch { expected: n, got: self.len() });
        }
        Ok(())
    }
}

/// A labeling together with its mistake sets against the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pseudolabeler {
    labeling: Labeling,
    mistakes: Vec<usize>,
    class_mistakes: Vec<Vec<usize>>,
    class_error: Vec<f64>,
    a_bar: f64,
}

impl Pseudolabeler {
    pub fn new(pop: &FinitePopulation, labeling: Labeling) -> Result<Self> {
        labeling.check_len(pop.len())?;
        if labeling.num_classes() != pop.num_classes() {
            return Err(LabError::InvalidArgument(format!(
                "pseudolabels use {} classes, population has {}",
                labeling.num_classes(),
                pop.num_classes()
            )));
        }
        let mistakes: Vec<usize> = (0..pop.len()).filter(|&i| labeling.get(i) != pop.labels()[i]).collect();
        let mut class_mistakes = vec![Vec::new(); pop.num_classes()];
        for &i in &mistakes {
            class_mistakes[pop.labels()[i]].push(i);
        }
        let class_error: Vec<f64> = class_mistakes
            .iter()
            .enumerate()
            .map(|(c, m)| {
                let total = pop.class_mass(c);
                if total > 0.0 {
                    pop.mass_of(m) / total
                } else {
                    0.0
                }
            })
            .collect();
        let a_bar = class_error.iter().copied().fold(0.0, f64::max);
        Ok(Pseudolabeler { labeling, mistakes, class_mistakes, class_error, a_bar })
    }

    pub fn labeling(&self) -> &Labeling {
        &self.labeling
    }

    /// `M(G_pl)`, sorted.
    pub fn mistakes(&self) -> &[usize] {
        &self.mistakes
    }

    /// `M_i = M(G_pl) ∩ C_i`.
    pub fn class_mistakes(&self, class: usize) -> &[usize] {
        &self.class_mistakes[class]
    }

    /// `P_i(M_i)` for each class.
    pub fn class_error(&self) -> &[f64] {
        &self.class_error
    }

    /// `ā = max_i P_i(M_i)`.
    pub fn a_bar(&self) -> f64 {
        self.a_bar
    }
}

fn check_graph_labeling(graph: &NeighborhoodGraph, g: &Labeling) -> Result<()> {
    g.check_len(graph.len())
}

fn is_robust(graph: &NeighborhoodGraph, g: &Labeling, i: usize) -> bool {
    graph.b_neighbors(i).iter().all(|&j| g.get(j) == g.get(i))
}

/// `R_B(G)`: mass of points with some `x′ ∈ B(x)` labeled differently.
pub fn robust_regularizer(graph: &NeighborhoodGraph, g: &Labeling) -> Result<f64> {
    check_graph_labeling(graph, g)?;
    let m = graph.population().masses();
    Ok((0..graph.len()).filter(|&i| !is_robust(graph, g, i)).map(|i| m[i]).fold(0.0, |s, x| s + x))
}

/// `S_B(G) = {x : G(x) = G(x′) for all x′ ∈ B(x)}`, sorted.
pub fn robust_set(graph: &NeighborhoodGraph, g: &Labeling) -> Result<Vec<usize>> {
    check_graph_labeling(graph, g)?;
    Ok((0..graph.len()).filter(|&i| is_robust(graph, g, i)).collect())
}

/// `L_{0−1}(G, G′)`.
pub fn disagreement(g: &Labeling, h: &Labeling, masses: &[f64]) -> Result<f64> {
    g.check_len(masses.len())?;
    h.check_len(masses.len())?;
    Ok((0..masses.len()).filter(|&i| g.get(i) != h.get(i)).map(|i| masses[i]).fold(0.0, |s, x| s + x))
}

/// `Err(G) = P(G(x) ≠ G*(x))`.
pub fn err(pop: &FinitePopulation, g: &Labeling) -> Result<f64> {
    disagreement(g, &Labeling::ground_truth(pop), pop.masses())
}

/// `Err_i(G) = P_i(G(x) ≠ i)`; zero for an empty class.
pub fn per_class_err(pop: &FinitePopulation, g: &Labeling, class: usize) -> Result<f64> {
    g.check_len(pop.len())?;
    if class >= pop.num_classes() {
        return Err(LabError::IndexOutOfRange { index: class, len: pop.num_classes() });
    }
    let total = pop.class_mass(class);
    if total == 0.0 {
        return Ok(0.0);
    }
    let wrong: f64 = pop
        .class_members(class)
        .into_iter()
        .filter(|&i| g.get(i) != class)
        .map(|i| pop.masses()[i])
        .fold(0.0, |s, x| s + x);
    Ok(wrong / total)
}

/// `A[g][t]`: mass with predicted class `g` and true class `t`, padded square.
fn agreement_matrix(pop: &FinitePopulation, g: &Labeling) -> Result<Vec<Vec<f64>>> {
    g.check_len(pop.len())?;
    let k = g.num_classes().max(pop.num_classes());
    let mut a = vec![vec![0.0; k]; k];
    for i in 0..pop.len() {
        a[g.get(i)][pop.labels()[i]] += pop.masses()[i];
    }
    Ok(a)
}

fn matched_error(pop: &FinitePopulation, a: &[Vec<f64>], perm: &[usize]) -> f64 {
    let total: f64 = pop.masses().iter().sum();
    let kept: f64 = perm.iter().enumerate().map(|(g, &t)| a[g][t]).sum();
    (total - kept).max(0.0)
}

/// Cap on `K` for factorial enumeration.
pub const ENUMERATION_MAX_CLASSES: usize = 10;

/// Permutation-invariant error by enumerating all `K!` relabelings.
pub fn err_unsup_enumerate(pop: &FinitePopulation, g: &Labeling) -> Result<f64> {
    let a = agreement_matrix(pop, g)?;
    let k = a.len();
    if k > ENUMERATION_MAX_CLASSES {
        return Err(LabError::TooLarge { size: k, cap: ENUMERATION_MAX_CLASSES });
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = matched_error(pop, &a, &perm);
    while next_permutation(&mut perm) {
        best = best.min(matched_error(pop, &a, &perm));
    }
    Ok(best)
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Permutation-invariant error via an optimal assignment on the agreement
/// matrix (Hungarian method with potentials, `O(K³)`).
pub fn err_unsup_assignment(pop: &FinitePopulation, g: &Labeling) -> Result<f64> {
    let a = agreement_matrix(pop, g)?;
    let perm = max_weight_assignment(&a);
    Ok(matched_error(pop, &a, &perm))
}

/// `err_unsup(G)`: enumeration up to ten classes, assignment beyond.
pub fn err_unsup(pop: &FinitePopulation, g: &Labeling) -> Result<f64> {
    if g.num_classes().max(pop.num_classes()) <= ENUMERATION_MAX_CLASSES {
        err_unsup_enumerate(pop, g)
    } else {
        err_unsup_assignment(pop, g)
    }
}

/// Row-to-column assignment maximizing the total weight of a square matrix.
pub fn max_weight_assignment(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    let top = w.iter().flatten().copied().fold(0.0, f64::max);
    let cost = |i: usize, j: usize| top - w[i][j];
    // 1-based arrays with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlObjective {
    pub value: f64,
    pub disagreement: f64,
    pub robust_regularizer: f64,
    pub pseudolabel_err: f64,
    #[serde(with = "crate::expansion::finite_or_null")]
    pub c: f64,
}

/// `L(G) = (c+1)/(c−1)·L_{0−1}(G, G_pl) + 2c/(c−1)·R_B(G) − Err(G_pl)`.
/// `c = ∞` is accepted and gives coefficients 1 and 2.
pub fn pl_objective(graph: &NeighborhoodGraph, g: &Labeling, pl: &Pseudolabeler, c: f64) -> Result<PlObjective> {
    if !(c > 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must exceed 1")));
    }
    let masses = graph.population().masses();
    let l01 = disagreement(g, pl.labeling(), masses)?;
    let rb = robust_regularizer(graph, g)?;
    let e = err(graph.population(), pl.labeling())?;
    let s = 2.0 / (c - 1.0);
    Ok(PlObjective {
        value: (1.0 + s) * l01 + (2.0 + s) * rb - e,
        disagreement: l01,
        robust_regularizer: rb,
        pseudolabel_err: e,
        c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// `min_y P(G = y) − max{2/(c−1), 2}·R_B(G)`; feasible iff positive.
    pub margin: f64,
    pub min_class_mass: f64,
    pub threshold: f64,
    pub robust_regularizer: f64,
}

/// Whether `min_y P(G = y) > max{2/(c−1), 2}·R_B(G)`.
pub fn unsup_feasible(graph: &NeighborhoodGraph, g: &Labeling, c: f64) -> Result<Feasibility> {
    if !(c > 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must exceed 1")));
    }
    let rb = robust_regularizer(graph, g)?;
    let k = g.num_classes().max(graph.population().num_classes());
    let mut masses = g.class_masses(graph.population().masses());
    masses.resize(k, 0.0);
    let min_mass = masses.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = (2.0 / (c - 1.0)).max(2.0) * rb;
    let margin = min_mass - threshold;
    Ok(Feasibility { feasible: margin > 0.0, margin, min_class_mass: min_mass, threshold, robust_regularizer: rb })
}

// ---------------------------------------------------------------------------
// Net surrogate losses
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pseudolabel: f64,
    /// `λ_v`
    pub consistency: f64,
    pub min_entropy: f64,
    pub balance: f64,
    /// `ρ_target` in the hinge `Σ_y max(0, ρ_target − p̄_y)`.
    pub balance_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pseudolabel: 1.0, consistency: 0.0, min_entropy: 1.0, balance: 0.0, balance_target: 0.0 }
    }
}

/// Per-example inputs beyond the clean point.
#[derive(Clone, Debug, Default)]
pub struct BatchExtras {
    /// Adversarial inputs for the consistency term.
    pub adversarial: Option<Vec<Vec<f64>>>,
    /// Hidden-layer perturbations used together with `adversarial`.
    pub perturbations: Option<Vec<PerturbationVector>>,
    /// Points whose pseudolabel is ignored in favor of min-entropy.
    pub ignored: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub pseudolabel: f64,
    pub consistency: f64,
    pub min_entropy: f64,
    pub balance: f64,
    #[serde(skip)]
    pub weight_grads: Vec<Mat>,
}

/// Batch surrogate: weighted cross-entropy to pseudolabels, consistency
/// `KL(F(x) ‖ F(x_adv))` differentiated through both sides, entropy on ignored points
/// (all points when `pl` is absent) and a class-balance hinge on the mean
/// softmax marginal. Returns the value and exact weight gradients.
pub fn net_losses(
    net: &FeedforwardNet,
    pop: &FinitePopulation,
    pl: Option<&Pseudolabeler>,
    batch: &[usize],
    weights: &LossWeights,
    extras: &BatchExtras,
) -> Result<LossBundle> {
    let ws = [weights.pseudolabel, weights.consistency, weights.min_entropy, weights.balance, weights.balance_target];
    if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(LabError::InvalidArgument("loss weights must be finite and nonnegative".into()));
    }
    if batch.is_empty() {
        return Err(LabError::InvalidArgument("empty batch".into()));
    }
    let b = batch.len();
    if !extras.ignored.is_empty() && extras.ignored.len() != b {
        return Err(LabError::DimensionMismatch { expected: b, got: extras.ignored.len() });
    }
    for v in
        [extras.adversarial.as_ref().map(Vec::len), extras.perturbations.as_ref().map(Vec::len)].into_iter().flatten()
    {
        if v != b {
            return Err(LabError::DimensionMismatch { expected: b, got: v });
        }
    }
    let k = net.num_classes();
    let scale = 1.0 / b as f64;
    let mut grads: Vec<Mat> = net.weights().iter().map(|w| Mat::zeros(w.rows, w.cols)).collect();
    let (mut pl_loss, mut cons, mut ent) = (0.0, 0.0, 0.0);
    let mut traces = Vec::with_capacity(b);
    let mut probs = Vec::with_capacity(b);
    for (slot, &i) in batch.iter().enumerate() {
        pop.check_index(i)?;
        let tr = trace(net, pop.point(i), None)?;
        let z = tr.logits().to_vec();
        let ls = log_softmax(&z);
        let p: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let ignored = pl.is_none() || extras.ignored.get(slot).copied().unwrap_or(false);
        let mut dz = vec![0.0; k];
        if !ignored {
            let y = pl.unwrap().labeling().get(i);
            pl_loss += -ls[y];
            for j in 0..k {
                dz[j] += weights.pseudolabel * (p[j] - if j == y { 1.0 } else { 0.0 });
            }
        } else if weights.min_entropy > 0.0 {
            let h: f64 = -p.iter().zip(&ls).map(|(a, l)| a * l).sum::<f64>();
            ent += h;
            for j in 0..k {
                dz[j] += weights.min_entropy * (-p[j] * (ls[j] + h));
            }
        }
        if weights.consistency > 0.0 {
            if let Some(adv) = &extras.adversarial {
                let delta = extras.perturbations.as_ref().map(|d| &d[slot]);
                let ta = trace(net, &adv[slot], delta)?;
                let la = log_softmax(ta.logits());
                let kl: f64 = p.iter().zip(ls.iter().zip(&la)).map(|(pi, (l, q))| pi * (l - q)).sum();
                cons += kl;
                let dza: Vec<f64> = la.iter().zip(&p).map(|(q, pi)| weights.consistency * (q.exp() - pi)).collect();
                backward(net, &ta, &dza, scale, Some(&mut grads));
                for j in 0..k {
                    dz[j] += weights.consistency * p[j] * (ls[j] - la[j] - kl);
                }
            }
        }
        if dz.iter().any(|&v| v != 0.0) {
            backward(net, &tr, &dz, scale, Some(&mut grads));
        }
        traces.push(tr);
        probs.push(p);
    }
    let mut bal = 0.0;
    if weights.balance > 0.0 {
        let mut mean = vec![0.0; k];
        for p in &probs {
            for j in 0..k {
                mean[j] += p[j] * scale;
            }
        }
        let active: Vec<usize> = (0..k).filter(|&y| weights.balance_target - mean[y] > 0.0).collect();
        bal = active.iter().map(|&y| weights.balance_target - mean[y]).sum();
        if !active.is_empty() {
            for (tr, p) in traces.iter().zip(&probs) {
                let mut dz = vec![0.0; k];
                for &y in &active {
                    for j in 0..k {
                        let dpy = p[y] * (if j == y { 1.0 } else { 0.0 } - p[j]);
                        dz[j] -= weights.balance * dpy;
                    }
                }
                backward(net, tr, &dz, scale, Some(&mut grads));
            }
        }
    }
    let (pl_loss, cons, ent) = (pl_loss * scale, cons * scale, ent * scale);
    let total =
        weights.pseudolabel * pl_loss + weights.consistency * cons + weights.min_entropy * ent + weights.balance * bal;
    Ok(LossBundle {
        total,
        pseudolabel: pl_loss,
        consistency: cons,
        min_entropy: ent,
        balance: bal,
        weight_grads: grads,
    })
}

/// Softmax probabilities of every population point.
pub fn predict_proba(net: &FeedforwardNet, pop: &FinitePopulation) -> Result<Vec<Vec<f64>>> {
    pop.points().iter().map(|x| Ok(softmax(&crate::nets::forward(net, x)?))).collect()
}

/// Labeling induced by a net's argmax.
pub fn net_labeling(net: &FeedforwardNet, pop: &FinitePopulation) -> Result<Labeling> {
    if net.num_classes() < pop.num_classes() {
        return Err(LabError::InvalidArgument("net has fewer outputs than the population has classes".into()));
    }
    let a = pop.points().iter().map(|x| crate::nets::predict(net, x)).collect::<Result<Vec<_>>>()?;
    Labeling::new(a, net.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataspace::{build_neighborhood_graph, measure_separation, TransformSpec};
    use crate::nets::Activation;

    fn line_pop() -> FinitePopulation {
        // points on a line, spacing 1; classes split in the middle
        let pts = (0..6).map(|i| vec![i as f64]).collect();
        FinitePopulation::new(pts, vec![0.1, 0.2, 0.2, 0.1, 0.3, 0.1], vec![0, 0, 0, 1, 1, 1], 2).unwrap()
    }

    #[test]
    fn regularizer_basics() {
        let pop = line_pop();
        let g = build_neighborhood_graph(&pop, &TransformSpec::ball(1.0)).unwrap();
        let constant = Labeling::constant(6, 2, 1).unwrap();
        assert_eq!(robust_regularizer(&g, &constant).unwrap(), 0.0);
        assert_eq!(robust_set(&g, &constant).unwrap(), (0..6).collect::<Vec<_>>());
        let truth = Labeling::ground_truth(&pop);
        assert_eq!(robust_regularizer(&g, &truth).unwrap(), measure_separation(&g));
        // points 2 and 3 straddle the boundary
        assert!((robust_regularizer(&g, &truth).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(robust_set(&g, &truth).unwrap(), vec![0, 1, 4, 5]);
    }

    #[test]
    fn planted_single_point() {
        let pop = FinitePopulation::new(vec![vec![0.0], vec![0.5], vec![10.0]], vec![0.1, 0.5, 0.4], vec![0, 0, 1], 2)
            .unwrap();
        let g = build_neighborhood_graph(&pop, &TransformSpec::ball(0.5)).unwrap();
        let lab = Labeling::new(vec![1, 0, 1], 2).unwrap();
        // both 0 and 1 see a differing neighbor
        assert!((robust_regularizer(&g, &lab).unwrap() - 0.6).abs() < 1e-15);
        let g2 = build_neighborhood_graph(&pop, &TransformSpec::ball(0.5)).unwrap();
        let lab2 = Labeling::new(vec![0, 0, 0], 2).unwrap();
        assert_eq!(robust_regularizer(&g2, &lab2).unwrap(), 0.0);
    }

    #[test]
    fn disagreement_and_err() {
        let pop = line_pop();
        let g = Labeling::ground_truth(&pop);
        assert_eq!(disagreement(&g, &g, pop.masses()).unwrap(), 0.0);
        let flip = Labeling::new(g.assignment().iter().map(|c| 1 - c).collect(), 2).unwrap();
        assert!((disagreement(&g, &flip, pop.masses()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(err(&pop, &g).unwrap(), 0.0);
        let mut a = g.assignment().to_vec();
        a[1] = 1;
        let one = Labeling::new(a, 2).unwrap();
        assert!((err(&pop, &one).unwrap() - 0.2).abs() < 1e-15);
        let per: f64 = (0..2).map(|c| per_class_err(&pop, &one, c).unwrap() * pop.class_mass(c)).sum();
        assert!((per - err(&pop, &one).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn err_unsup_permutations() {
        let pts = (0..9).map(|i| vec![i as f64]).collect();
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let masses = vec![0.05, 0.1, 0.15, 0.1, 0.1, 0.1, 0.2, 0.1, 0.1];
        let pop = FinitePopulation::new(pts, masses, labels.clone(), 3).unwrap();
        let perm = Labeling::new(labels.iter().map(|&c| (c + 1) % 3).collect(), 3).unwrap();
        assert_eq!(err_unsup(&pop, &perm).unwrap(), 0.0);
        assert!((err(&pop, &perm).unwrap() - 1.0).abs() < 1e-12);
        let confused = Labeling::new(vec![1, 1, 2, 0, 0, 0, 2, 1, 2], 3).unwrap();
        let brute = {
            let mut best = f64::INFINITY;
            for p in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
                let l = Labeling::new(confused.assignment().iter().map(|&c| p[c]).collect(), 3).unwrap();
                best = best.min(err(&pop, &l).unwrap());
            }
            best
        };
        assert!((err_unsup_enumerate(&pop, &confused).unwrap() - brute).abs() < 1e-15);
        assert_eq!(err_unsup_enumerate(&pop, &confused).unwrap(), err_unsup_assignment(&pop, &confused).unwrap());
    }

    #[test]
    fn assignment_is_optimal_on_small_matrices() {
        let w = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let p = max_weight_assignment(&w);
        let v: f64 = p.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
        assert_eq!(v, 11.0);
    }

    #[test]
    fn pl_objective_arithmetic() {
        let pop = line_pop();
        let g = build_neighborhood_graph(&pop, &TransformSpec::ball(1.0)).unwrap();
        let truth = Labeling::ground_truth(&pop);
        let pl = Pseudolabeler::new(&pop, truth.clone()).unwrap();
        let o = pl_objective(&g, &truth, &pl, 5.0).unwrap();
        assert!((o.value - 2.5 * measure_separation(&g)).abs() < 1e-15);
        let inf = pl_objective(&g, &truth, &pl, f64::INFINITY).unwrap();
        assert!((inf.value - 2.0 * measure_separation(&g)).abs() < 1e-15);
        assert!(pl_objective(&g, &truth, &pl, 1.0).is_err());
        // pl wrong on point 1 (mass 0.2); G differs from pl on point 0 (0.1)
        let pl = Pseudolabeler::new(&pop, Labeling::new(vec![0, 1, 0, 1, 1, 1], 2).unwrap()).unwrap();
        let h = Labeling::new(vec![1, 1, 0, 1, 1, 1], 2).unwrap();
        let o = pl_objective(&g, &h, &pl, 5.0).unwrap();
        assert!((o.disagreement - 0.1).abs() < 1e-15 && (o.pseudolabel_err - 0.2).abs() < 1e-15);
        // G's robust set under radius 1 loses points 1, 2 and 3
        assert!((o.robust_regularizer - 0.5).abs() < 1e-15);
        assert!((o.value - (1.5 * 0.1 + 2.5 * 0.5 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn pseudolabeler_mistake_sets() {
        let pop = line_pop();
        let lab = Labeling::new(vec![0, 1, 0, 1, 0, 1], 2).unwrap();
        let pl = Pseudolabeler::new(&pop, lab).unwrap();
        assert_eq!(pl.mistakes(), &[1, 4]);
        assert_eq!(pl.class_mistakes(0), &[1]);
        assert!((pl.class_error()[0] - 0.4).abs() < 1e-15);
        assert!((pl.class_error()[1] - 0.6).abs() < 1e-15);
        assert!((pl.a_bar() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn feasibility_verdicts() {
        let pop = line_pop();
        let g = build_neighborhood_graph(&pop, &TransformSpec::ball(0.4)).unwrap();
        let constant = Labeling::constant(6, 2, 0).unwrap();
        assert!(!unsup_feasible(&g, &constant, 3.0).unwrap().feasible);
        let truth = Labeling::ground_truth(&pop);
        assert!(unsup_feasible(&g, &truth, 3.0).unwrap().feasible);
        // radius 1: R_B = 0.3, min class mass 0.5, threshold max(1, 2)·0.3
        let g1 = build_neighborhood_graph(&pop, &TransformSpec::ball(1.0)).unwrap();
        let f = unsup_feasible(&g1, &truth, 3.0).unwrap();
        assert!(!f.feasible);
        assert!((f.threshold - 0.6).abs() < 1e-12);
        assert!((f.margin + 0.1).abs() < 1e-12);
    }

    #[test]
    fn net_losses_match_logit_recomputation() {
        let pop = line_pop();
        let net = FeedforwardNet::random(&[1, 4, 2], Activation::Softplus, 1.0, 3).unwrap();
        let pl = Pseudolabeler::new(&pop, Labeling::new(vec![0, 1, 0, 1, 1, 1], 2).unwrap()).unwrap();
        let batch = [0, 2, 3, 5];
        let adv: Vec<Vec<f64>> = batch.iter().map(|&i| vec![pop.point(i)[0] + 0.3]).collect();
        let extras = BatchExtras {
            adversarial: Some(adv.clone()),
            perturbations: None,
            ignored: vec![false, true, false, false],
        };
        let w = LossWeights { pseudolabel: 1.0, consistency: 3.0, min_entropy: 0.5, balance: 2.0, balance_target: 0.6 };
        let out = net_losses(&net, &pop, Some(&pl), &batch, &w, &extras).unwrap();
        let (mut ce, mut kl, mut h) = (0.0, 0.0, 0.0);
        let mut mean = [0.0; 2];
        for (s, &i) in batch.iter().enumerate() {
            let z = crate::nets::forward(&net, pop.point(i)).unwrap();
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let p: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
            let za = crate::nets::forward(&net, &adv[s]).unwrap();
            let ea: Vec<f64> = za.iter().map(|v| v.exp()).collect();
            let q: Vec<f64> = ea.iter().map(|v| v / (ea[0] + ea[1])).collect();
            if s == 1 {
                h -= p[0] * p[0].ln() + p[1] * p[1].ln();
            } else {
                ce -= p[pl.labeling().get(i)].ln();
            }
            kl += p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
            mean[0] += p[0] / 4.0;
            mean[1] += p[1] / 4.0;
        }
        let bal: f64 = mean.iter().map(|m| (0.6 - m).max(0.0)).sum();
        let expect = ce / 4.0 + 3.0 * kl / 4.0 + 0.5 * h / 4.0 + 2.0 * bal;
        assert!((out.total - expect).abs() < 1e-12, "{} vs {}", out.total, expect);
    }

    #[test]
    fn net_loss_gradients_match_central_differences() {
        let pop = line_pop();
        let net = FeedforwardNet::random(&[1, 5, 3], Activation::Tanh, 1.0, 8).unwrap();
        let pop3 = pop.relabeled(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let pl = Pseudolabeler::new(&pop3, Labeling::new(vec![0, 1, 2, 2, 1, 0], 3).unwrap()).unwrap();
        let batch = [0, 1, 4, 5];
        let adv: Vec<Vec<f64>> = batch.iter().map(|&i| vec![pop3.point(i)[0] - 0.2]).collect();
        let extras = BatchExtras {
            adversarial: Some(adv),
            perturbations: Some(
                batch.iter().map(|_| PerturbationVector { layers: vec![vec![0.05; 5], vec![-0.02; 3]] }).collect(),
            ),
            ignored: vec![true, false, false, true],
        };
        let w =
            LossWeights { pseudolabel: 1.0, consistency: 2.0, min_entropy: 0.7, balance: 1.5, balance_target: 0.45 };
        let base = net_losses(&net, &pop3, Some(&pl), &batch, &w, &extras).unwrap();
        let h = 1e-5;
        for l in 0..net.depth() {
            for k in 0..net.weights()[l].data.len() {
                let mut p = net.weights().to_vec();
                let mut m = net.weights().to_vec();
                p[l].data[k] += h;
                m[l].data[k] -= h;
                let fp =
                    net_losses(&net.with_weights(p).unwrap(), &pop3, Some(&pl), &batch, &w, &extras).unwrap().total;
                let fm =
                    net_losses(&net.with_weights(m).unwrap(), &pop3, Some(&pl), &batch, &w, &extras).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let g = base.weight_grads[l].data[k];
                assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-3), "{fd} vs {g}");
            }
        }
    }

    #[test]
    fn fitted_net_has_vanishing_pseudolabel_loss() {
        // a 1-layer net with huge logit gaps on two separated points
        let pop = FinitePopulation::uniform(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1], 2).unwrap();
        let w = Mat::from_rows(&[vec![200.0, 0.0], vec![0.0, 200.0]]).unwrap();
        let net = FeedforwardNet::new(vec![w], Activation::Softplus).unwrap();
        let pl = Pseudolabeler::new(&pop, Labeling::ground_truth(&pop)).unwrap();
        let out = net_losses(&net, &pop, Some(&pl), &[0, 1], &LossWeights::default(), &BatchExtras::default()).unwrap();
        assert!(out.total < 1e-80);
    }

    #[test]
    fn symmetric_instance_gives_symmetric_gradients() {
        let pop = FinitePopulation::uniform(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1], 2).unwrap();
        let w = Mat::from_rows(&[vec![0.3, 0.1], vec![0.1, 0.3]]).unwrap();
        let net = FeedforwardNet::new(vec![w], Activation::Softplus).unwrap();
        let pl = Pseudolabeler::new(&pop, Labeling::ground_truth(&pop)).unwrap();
        let out = net_losses(&net, &pop, Some(&pl), &[0, 1], &LossWeights::default(), &BatchExtras::default()).unwrap();
        let g = &out.weight_grads[0];
        assert!((g.get(0, 0) - g.get(1, 1)).abs() < 1e-15 && (g.get(0, 1) - g.get(1, 0)).abs() < 1e-15);
    }
}
