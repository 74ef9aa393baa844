//! Minimizers of the labeling objectives and the self-training loop for nets
//! (pseudolabels, VAT consistency, hidden-layer perturbations, min-entropy
//! with quantile-based ignoring).

use crate::dataspace::{gen_two_moons, FinitePopulation, NeighborhoodGraph};
use crate::error::{LabError, Result};
use crate::linalg::{axpy, dist, norm, Mat};
use crate::nets::{
    backward, forward, log_softmax, loss_on_logits, predict, softmax, trace, Activation, FeedforwardNet, LossSpec,
    PerturbationVector, Target,
};
use crate::objectives::{err, err_unsup, net_labeling, net_losses, BatchExtras, Labeling, LossWeights, Pseudolabeler};
use crate::stats::{quantile, spearman};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Pseudolabelers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PseudolabelMode {
    /// Uniformly random mistakes, each flipped to a random other class.
    Random,
    /// The points of each class nearest to a random member of it, all
    /// flipped to the next class.
    Clustered,
}

/// Pseudolabeler whose per-class mistake fraction is the largest achievable
/// value not above `a_target` (so within one point's share of it).
pub fn make_pseudolabeler(
    pop: &FinitePopulation,
    a_target: f64,
    mode: &PseudolabelMode,
    seed: u64,
) -> Result<Pseudolabeler> {
    if !(0.0..1.0).contains(&a_target) {
        return Err(LabError::InvalidArgument(format!("target mistake fraction {a_target} outside [0, 1)")));
    }
    let k = pop.num_classes();
    if a_target > 0.0 && k < 2 {
        return Err(LabError::InvalidArgument("cannot mislabel a single-class population".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = pop.labels().to_vec();
    for c in 0..k {
        let members = pop.class_members(c);
        let total = pop.class_mass(c);
        if members.is_empty() || total == 0.0 || a_target == 0.0 {
            continue;
        }
        let order = match mode {
            PseudolabelMode::Random => {
                let mut m = members.clone();
                m.shuffle(&mut rng);
                m
            }
            PseudolabelMode::Clustered => ball_order(pop, &members, &mut rng),
        };
        let mut mass = 0.0;
        for i in order {
            let next = mass + pop.masses()[i];
            if next / total > a_target + crate::dataspace::MASS_TOL {
                break;
            }
            mass = next;
            labels[i] = match mode {
                PseudolabelMode::Random => (c + rng.gen_range(1..k)) % k,
                PseudolabelMode::Clustered => (c + 1) % k,
            };
        }
    }
    Pseudolabeler::new(pop, Labeling::new(labels, k)?)
}

/// Class members ordered by distance to a random member, nearest first.
fn ball_order(pop: &FinitePopulation, members: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let center = pop.point(members[rng.gen_range(0..members.len())]).to_vec();
    let mut order = members.to_vec();
    order.sort_by(|&a, &b| dist(pop.point(a), &center).total_cmp(&dist(pop.point(b), &center)).then(a.cmp(&b)));
    order
}

// ---------------------------------------------------------------------------
// Exact and local-search minimizers over labelings
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimizerOptions {
    /// Largest `K^n` enumerated exhaustively.
    pub exact_cap: u64,
    pub restarts: usize,
    pub seed: u64,
    /// Fail instead of falling back to local search.
    pub require_exact: bool,
}

impl Default for MinimizerOptions {
    fn default() -> Self {
        MinimizerOptions { exact_cap: 20_000_000, restarts: 20, seed: 0, require_exact: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Minimizer {
    /// `None` when no labeling satisfies the constraints.
    pub labeling: Option<Labeling>,
    #[serde(with = "crate::expansion::finite_or_null")]
    pub value: f64,
    pub exact: bool,
    pub evaluated: u64,
    /// Number of feasible labelings, for constrained exact searches.
    pub feasible_count: Option<u64>,
}

/// Flattened instance for fast repeated evaluation. Sums run in index order
/// so values agree bit-for-bit with the `objectives` functions.
struct Compiled<'a> {
    graph: &'a NeighborhoodGraph,
    masses: &'a [f64],
    k: usize,
}

impl Compiled<'_> {
    fn r_b(&self, g: &[usize]) -> f64 {
        (0..g.len())
            .filter(|&i| !self.graph.b_neighbors(i).iter().all(|&j| g[j] == g[i]))
            .map(|i| self.masses[i])
            .fold(0.0, |s, m| s + m)
    }

    fn pl_value(&self, g: &[usize], pl: &[usize], e: f64, s: f64) -> f64 {
        let l01: f64 = (0..g.len()).filter(|&i| g[i] != pl[i]).map(|i| self.masses[i]).fold(0.0, |s, m| s + m);
        (1.0 + s) * l01 + (2.0 + s) * self.r_b(g) - e
    }

    /// `(margin, R_B)` of the balance constraint.
    fn unsup_parts(&self, g: &[usize], factor: f64) -> (f64, f64) {
        let mut cm = vec![0.0; self.k];
        for (&c, &m) in g.iter().zip(self.masses) {
            cm[c] += m;
        }
        let min_mass = cm.iter().copied().fold(f64::INFINITY, f64::min);
        let rb = self.r_b(g);
        (min_mass - factor * rb, rb)
    }
}

fn enumeration_size(k: usize, n: usize) -> Option<u64> {
    (k as u64).checked_pow(n as u32)
}

/// Exhaustive argmin over `0..k^n` with the lexicographically smallest
/// assignment kept on exact ties. `eval` returns `None` for infeasible
/// labelings.
fn enumerate_min<F>(k: usize, n: usize, eval: F) -> (Option<(f64, u64)>, u64)
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let total = enumeration_size(k, n).expect("checked by caller");
    let chunk = (total / 256).max(4096);
    let chunks = total.div_ceil(chunk);
    let results: Vec<(Option<(f64, u64)>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(total);
            let mut digits = vec![0usize; n];
            let mut rem = lo;
            for d in (0..n).rev() {
                digits[d] = (rem % k as u64) as usize;
                rem /= k as u64;
            }
            let mut best: Option<(f64, u64)> = None;
            let mut feasible = 0u64;
            for idx in lo..hi {
                if let Some(v) = eval(&digits) {
                    feasible += 1;
                    if best.is_none_or(|(b, _)| v < b) {
                        best = Some((v, idx));
                    }
                }
                for d in (0..n).rev() {
                    digits[d] += 1;
                    if digits[d] < k {
                        break;
                    }
                    digits[d] = 0;
                }
            }
            (best, feasible)
        })
        .collect();
    let mut best: Option<(f64, u64)> = None;
    let mut feasible = 0;
    for (b, f) in results {
        feasible += f;
        if let Some((v, i)) = b {
            if best.is_none_or(|(bv, _)| v < bv) {
                best = Some((v, i));
            }
        }
    }
    (best, feasible)
}

fn decode(mut idx: u64, k: usize, n: usize) -> Vec<usize> {
    let mut digits = vec![0; n];
    for d in (0..n).rev() {
        digits[d] = (idx % k as u64) as usize;
        idx /= k as u64;
    }
    digits
}

/// First-improvement single-point relabeling from several starts. Scores are
/// compared lexicographically as `(constraint violation, value)`.
fn local_search<F>(k: usize, n: usize, starts: Vec<Vec<usize>>, score: F) -> (Vec<usize>, (f64, f64), u64)
where
    F: Fn(&[usize]) -> (f64, f64),
{
    let mut evaluated = 0u64;
    let mut best: Option<(Vec<usize>, (f64, f64))> = None;
    for mut g in starts {
        let mut cur = score(&g);
        evaluated += 1;
        loop {
            let mut improved = false;
            for i in 0..n {
                let orig = g[i];
                for c in 0..k {
                    if c == orig {
                        continue;
                    }
                    g[i] = c;
                    let s = score(&g);
                    evaluated += 1;
                    if s < cur {
                        cur = s;
                        improved = true;
                        break;
                    }
                    g[i] = orig;
                }
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|(bg, bs)| cur < *bs || (cur == *bs && g < *bg)) {
            best = Some((g, cur));
        }
    }
    let (g, s) = best.expect("at least one start");
    (g, s, evaluated)
}

fn random_starts(k: usize, n: usize, count: usize, seed: u64, first: Option<Vec<usize>>) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<usize>> = first.into_iter().collect();
    while starts.len() < count.max(1) {
        starts.push((0..n).map(|_| rng.gen_range(0..k)).collect());
    }
    starts
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must exceed 1")));
    }
    Ok(())
}

/// Global argmin of the pseudolabel objective `L(G)` over all labelings.
pub fn brute_force_min_pl(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    c: f64,
    opt: &MinimizerOptions,
) -> Result<Minimizer> {
    check_c(c)?;
    let pop = graph.population();
    let (n, k) = (pop.len(), pop.num_classes());
    let comp = Compiled { graph, masses: pop.masses(), k };
    let e = err(pop, pl.labeling())?;
    let s = 2.0 / (c - 1.0);
    let pl_labels = pl.labeling().assignment();
    match enumeration_size(k, n).filter(|&t| t <= opt.exact_cap) {
        Some(_) => {
            let (best, count) = enumerate_min(k, n, |g| Some(comp.pl_value(g, pl_labels, e, s)));
            let (v, idx) = best.expect("unconstrained search always has a minimizer");
            Ok(Minimizer {
                labeling: Some(Labeling::new(decode(idx, k, n), k)?),
                value: v,
                exact: true,
                evaluated: count,
                feasible_count: None,
            })
        }
        None if opt.require_exact => {
            Err(LabError::BudgetExceeded(format!("{k}^{n} labelings exceed {}", opt.exact_cap)))
        }
        None => {
            let starts = random_starts(k, n, opt.restarts, opt.seed, Some(pl_labels.to_vec()));
            let (g, (_, v), evaluated) = local_search(k, n, starts, |g| (0.0, comp.pl_value(g, pl_labels, e, s)));
            Ok(Minimizer {
                labeling: Some(Labeling::new(g, k)?),
                value: v,
                exact: false,
                evaluated,
                feasible_count: None,
            })
        }
    }
}

/// Argmin of `R_B(G)` over labelings with `min_y P(G = y) > max{2/(c−1), 2}·R_B(G)`.
pub fn brute_force_min_unsup(graph: &NeighborhoodGraph, c: f64, opt: &MinimizerOptions) -> Result<Minimizer> {
    check_c(c)?;
    let pop = graph.population();
    let (n, k) = (pop.len(), pop.num_classes());
    let comp = Compiled { graph, masses: pop.masses(), k };
    let factor = (2.0 / (c - 1.0)).max(2.0);
    match enumeration_size(k, n).filter(|&t| t <= opt.exact_cap) {
        Some(total) => {
            let (best, feasible) = enumerate_min(k, n, |g| {
                let (margin, rb) = comp.unsup_parts(g, factor);
                (margin > 0.0).then_some(rb)
            });
            Ok(match best {
                Some((v, idx)) => Minimizer {
                    labeling: Some(Labeling::new(decode(idx, k, n), k)?),
                    value: v,
                    exact: true,
                    evaluated: total,
                    feasible_count: Some(feasible),
                },
                None => Minimizer {
                    labeling: None,
                    value: f64::INFINITY,
                    exact: true,
                    evaluated: total,
                    feasible_count: Some(0),
                },
            })
        }
        None if opt.require_exact => {
            Err(LabError::BudgetExceeded(format!("{k}^{n} labelings exceed {}", opt.exact_cap)))
        }
        None => {
            let starts = random_starts(k, n, opt.restarts, opt.seed, None);
            let (g, (viol, v), evaluated) = local_search(k, n, starts, |g| {
                let (margin, rb) = comp.unsup_parts(g, factor);
                if margin > 0.0 {
                    (0.0, rb)
                } else {
                    (1.0 - margin, rb)
                }
            });
            Ok(if viol == 0.0 {
                Minimizer {
                    labeling: Some(Labeling::new(g, k)?),
                    value: v,
                    exact: false,
                    evaluated,
                    feasible_count: None,
                }
            } else {
                Minimizer { labeling: None, value: f64::INFINITY, exact: false, evaluated, feasible_count: None }
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Adversarial perturbations
// ---------------------------------------------------------------------------

fn seeded_unit(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|t| t / n).collect();
        }
    }
}

/// One VAT power step: from `x + 10⁻⁶·radius·d₀` with `d₀` a seeded unit
/// vector, take the gradient of `KL(F(x) ‖ F(x′))` in `x′` and move distance
/// `radius` from `x` along it. Falls back to `d₀` when the gradient vanishes.
pub fn vat_perturbation(net: &FeedforwardNet, x: &[f64], radius: f64, seed: u64) -> Result<Vec<f64>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(LabError::InvalidArgument(format!("VAT radius {radius} must be positive")));
    }
    let p = softmax(&forward(net, x)?);
    let d0 = seeded_unit(x.len(), seed);
    let mut probe = x.to_vec();
    axpy(&mut probe, 1e-6 * radius, &d0);
    let tr = trace(net, &probe, None)?;
    let (_, dz) = loss_on_logits(&LossSpec::KlToReference, tr.logits(), &Target::Distribution(p))?;
    let g = backward(net, &tr, &dz, 1.0, None).input;
    let gn = norm(&g);
    let dir: Vec<f64> = if gn > 0.0 && gn.is_finite() { g.iter().map(|v| v / gn).collect() } else { d0 };
    let mut out = x.to_vec();
    axpy(&mut out, radius, &dir);
    Ok(out)
}

/// Ascent step on hidden-layer perturbations: the gradient of
/// `KL(ref ‖ F(x_adv, δ))` at `δ = 0`, scaled by `step_size`, with the
/// output layer left unperturbed.
pub fn amo_step(
    net: &FeedforwardNet,
    inputs: &[Vec<f64>],
    references: &[Vec<f64>],
    step_size: f64,
) -> Result<Vec<PerturbationVector>> {
    if inputs.len() != references.len() {
        return Err(LabError::DimensionMismatch { expected: inputs.len(), got: references.len() });
    }
    let zero = PerturbationVector::zeros(net);
    inputs
        .iter()
        .zip(references)
        .map(|(x, r)| {
            let tr = trace(net, x, Some(&zero))?;
            let (_, dz) = loss_on_logits(&LossSpec::KlToReference, tr.logits(), &Target::Distribution(r.clone()))?;
            let mut d = backward(net, &tr, &dz, 1.0, None).delta.expect("perturbed trace").scaled(step_size);
            if let Some(last) = d.layers.last_mut() {
                last.iter_mut().for_each(|v| *v = 0.0);
            }
            Ok(d)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak step size of the cosine schedule.
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub vat_enabled: bool,
    /// `λ_v`
    pub lambda_v: f64,
    pub vat_radius: f64,
    pub vat_steps: usize,
    pub amo_enabled: bool,
    pub amo_step_size: f64,
    pub min_entropy_enabled: bool,
    pub min_entropy_weight: f64,
    /// Final ignored fraction `τ`, reached linearly.
    pub tau_final: f64,
    pub ema_decay: f64,
    /// Decay of the tracked loss quantile.
    pub quantile_decay: f64,
    /// Class-balance hinge weight (unsupervised training only).
    pub balance_weight: f64,
    /// Fixed `ρ_target`; derived from the initial net when absent.
    pub balance_target: Option<f64>,
    /// Expansion factor `c` used for the derived balance target.
    #[serde(with = "crate::expansion::finite_or_null")]
    pub balance_c: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            vat_enabled: true,
            lambda_v: 10.0,
            vat_radius: 0.2,
            vat_steps: 1,
            amo_enabled: false,
            amo_step_size: 1.0,
            min_entropy_enabled: false,
            min_entropy_weight: 1.0,
            tau_final: 0.2,
            ema_decay: 0.999,
            quantile_decay: 0.999,
            balance_weight: 1.0,
            balance_target: None,
            balance_c: f64::INFINITY,
            eval_every: 100,
            seed: 0,
        }
    }
}

/// Components of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rung {
    Pl,
    PlVat,
    PlVatAmo,
    PlVatAmoMinEnt,
}

impl Rung {
    pub const ALL: [Rung; 4] = [Rung::Pl, Rung::PlVat, Rung::PlVatAmo, Rung::PlVatAmoMinEnt];

    pub fn name(self) -> &'static str {
        match self {
            Rung::Pl => "PL",
            Rung::PlVat => "PL+VAT",
            Rung::PlVatAmo => "PL+VAT+AMO",
            Rung::PlVatAmoMinEnt => "PL+VAT+AMO+MinEnt",
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidArgument(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("steps, batch_size and eval_every must be positive");
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("vat_radius", self.vat_radius),
            ("amo_step_size", self.amo_step_size),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_v", self.lambda_v),
            ("min_entropy_weight", self.min_entropy_weight),
            ("balance_weight", self.balance_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.tau_final) {
            return bad("tau_final must lie in [0, 1)");
        }
        for (name, v) in
            [("ema_decay", self.ema_decay), ("quantile_decay", self.quantile_decay), ("momentum", self.momentum)]
        {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        if self.vat_steps != 1 {
            return bad("only one VAT power step is supported");
        }
        if !(self.balance_c > 1.0) {
            return bad("balance_c must exceed 1");
        }
        if let Some(t) = self.balance_target {
            if !(0.0..=1.0).contains(&t) {
                return bad("balance_target must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Copy with the components of `rung` switched on and the rest off.
    pub fn rung(&self, rung: Rung) -> Self {
        let mut c = self.clone();
        c.vat_enabled = rung != Rung::Pl;
        c.amo_enabled = matches!(rung, Rung::PlVatAmo | Rung::PlVatAmoMinEnt);
        c.min_entropy_enabled = rung == Rung::PlVatAmoMinEnt;
        c
    }

    fn tau_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            self.tau_final
        } else {
            self.tau_final * step as f64 / (self.steps - 1) as f64
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
    }
}

/// EMA of the weights and of the `(1−τ_i)`-quantile of per-example
/// pseudolabel loss under the EMA model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: Vec<Mat>,
    pub decay: f64,
    pub quantile_decay: f64,
    pub quantile: Option<f64>,
    /// Batch quantiles fed to the tracker, one per step.
    pub batch_quantiles: Vec<f64>,
    /// Tracked quantile after each step.
    pub tracked: Vec<f64>,
}

impl EmaState {
    pub fn new(net: &FeedforwardNet, decay: f64, quantile_decay: f64) -> Self {
        EmaState {
            shadow: net.weights().to_vec(),
            decay,
            quantile_decay,
            quantile: None,
            batch_quantiles: Vec::new(),
            tracked: Vec::new(),
        }
    }

    pub fn update_weights(&mut self, net: &FeedforwardNet) {
        for (s, w) in self.shadow.iter_mut().zip(net.weights()) {
            for (a, b) in s.data.iter_mut().zip(&w.data) {
                *a = self.decay * *a + (1.0 - self.decay) * b;
            }
        }
    }

    /// Feeds one batch quantile; the tracker starts at the first value.
    pub fn update_quantile(&mut self, batch_quantile: f64) -> f64 {
        let q = match self.quantile {
            None => batch_quantile,
            Some(q) => self.quantile_decay * q + (1.0 - self.quantile_decay) * batch_quantile,
        };
        self.quantile = Some(q);
        self.batch_quantiles.push(batch_quantile);
        self.tracked.push(q);
        q
    }

    /// Tracked values recomputed from a quantile log.
    pub fn replay(batch_quantiles: &[f64], decay: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch_quantiles.len());
        for (i, &b) in batch_quantiles.iter().enumerate() {
            out.push(if i == 0 { b } else { decay * out[i - 1] + (1.0 - decay) * b });
        }
        out
    }

    pub fn net(&self, like: &FeedforwardNet) -> Result<FeedforwardNet> {
        like.with_weights(self.shadow.clone())
    }
}

/// Columns of the training history CSV, in order.
pub const HISTORY_COLUMNS: [&str; 8] =
    ["step", "loss", "err", "err_unsup", "disagreement_pl", "r_b_estimate", "tau_i", "ignored_fraction"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub err: f64,
    pub err_unsup: f64,
    /// Empty in unsupervised runs.
    pub disagreement_pl: Option<f64>,
    pub r_b_estimate: f64,
    pub tau_i: f64,
    pub ignored_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub net: FeedforwardNet,
    pub history: Vec<HistoryRow>,
    pub ema: EmaState,
    pub balance_target: Option<f64>,
}

/// Mass of points whose prediction changes at their VAT adversarial point.
pub fn r_b_estimate(net: &FeedforwardNet, pop: &FinitePopulation, radius: f64, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..pop.len() {
        let x = pop.point(i);
        let adv = vat_perturbation(net, x, radius, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
        if predict(net, &adv)? != predict(net, x)? {
            total += pop.masses()[i];
        }
    }
    Ok(total)
}

fn step_seed(seed: u64, step: usize, slot: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((step as u64) << 20) ^ slot as u64
}

/// Self-training on pseudolabels with the components enabled in `cfg`.
pub fn train_pseudolabel(
    net: &FeedforwardNet,
    pop: &FinitePopulation,
    pl: &Pseudolabeler,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if pl.labeling().len() != pop.len() {
        return Err(LabError::DimensionMismatch { expected: pop.len(), got: pl.labeling().len() });
    }
    train(net, pop, Some(pl), cfg)
}

/// Unsupervised training: consistency, entropy on all points and the
/// class-balance hinge.
pub fn train_unsup(net: &FeedforwardNet, pop: &FinitePopulation, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(net, pop, None, cfg)
}

fn train(
    net0: &FeedforwardNet,
    pop: &FinitePopulation,
    pl: Option<&Pseudolabeler>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if net0.input_dim() != pop.dim() {
        return Err(LabError::DimensionMismatch { expected: pop.dim(), got: net0.input_dim() });
    }
    if net0.num_classes() < pop.num_classes() {
        return Err(LabError::InvalidArgument("net has fewer outputs than the population has classes".into()));
    }
    let mut net = net0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = WeightedIndex::new(pop.masses()).map_err(|e| LabError::InvalidPopulation(e.to_string()))?;
    let k = net.num_classes();
    let balance_target = match (pl, cfg.balance_weight > 0.0) {
        (None, true) => Some(match cfg.balance_target {
            Some(t) => t,
            None => {
                let factor = (2.0 / (cfg.balance_c - 1.0)).max(2.0);
                let rb = r_b_estimate(&net, pop, cfg.vat_radius, cfg.seed)?;
                (1.05 * factor * rb).min(1.0 / k as f64)
            }
        }),
        _ => None,
    };
    let weights = LossWeights {
        pseudolabel: if pl.is_some() { 1.0 } else { 0.0 },
        consistency: if cfg.vat_enabled { cfg.lambda_v } else { 0.0 },
        min_entropy: if pl.is_none() || cfg.min_entropy_enabled { cfg.min_entropy_weight } else { 0.0 },
        balance: if balance_target.is_some() { cfg.balance_weight } else { 0.0 },
        balance_target: balance_target.unwrap_or(0.0),
    };
    let mut ema = EmaState::new(&net, cfg.ema_decay, cfg.quantile_decay);
    let mut velocity: Vec<Mat> = net.weights().iter().map(|w| Mat::zeros(w.rows, w.cols)).collect();
    let mut history = Vec::new();
    let mut ignored_since_eval = (0usize, 0usize);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect();
        let tau = cfg.tau_at(step);
        let mut extras = BatchExtras::default();
        if let (Some(pl), true) = (pl, cfg.min_entropy_enabled) {
            let ema_net = ema.net(&net)?;
            let losses = batch
                .iter()
                .map(|&i| {
                    let z = forward(&ema_net, pop.point(i))?;
                    Ok(-log_softmax(&z)[pl.labeling().get(i)])
                })
                .collect::<Result<Vec<f64>>>()?;
            let q = ema.update_quantile(quantile(&losses, 1.0 - tau));
            extras.ignored = losses.iter().map(|&l| tau > 0.0 && l > q).collect();
        }
        ignored_since_eval.0 += extras.ignored.iter().filter(|&&b| b).count();
        ignored_since_eval.1 += batch.len();
        if cfg.vat_enabled {
            let adv = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| vat_perturbation(&net, pop.point(i), cfg.vat_radius, step_seed(cfg.seed, step, slot)))
                .collect::<Result<Vec<_>>>()?;
            if cfg.amo_enabled {
                let refs =
                    batch.iter().map(|&i| Ok(softmax(&forward(&net, pop.point(i))?))).collect::<Result<Vec<_>>>()?;
                extras.perturbations = Some(amo_step(&net, &adv, &refs, cfg.amo_step_size)?);
            }
            extras.adversarial = Some(adv);
        }
        let out = net_losses(&net, pop, pl, &batch, &weights, &extras)?;
        if !out.total.is_finite() || out.weight_grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
            return Err(LabError::Diverged { step, detail: format!("loss {}", out.total) });
        }
        let lr = cfg.lr_at(step);
        let mut new_w = net.weights().to_vec();
        for ((w, g), v) in new_w.iter_mut().zip(&out.weight_grads).zip(velocity.iter_mut()) {
            for t in 0..w.data.len() {
                let grad = g.data[t] + cfg.weight_decay * w.data[t];
                v.data[t] = cfg.momentum * v.data[t] + grad;
                w.data[t] -= lr * v.data[t];
            }
        }
        net = net.with_weights(new_w).map_err(|e| LabError::Diverged { step, detail: e.to_string() })?;
        ema.update_weights(&net);
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let g = net_labeling(&net, pop)?;
            let g = Labeling::new(g.assignment().to_vec(), k)?;
            let eval_pop = if k == pop.num_classes() { pop.clone() } else { pop.relabeled(pop.labels().to_vec(), k)? };
            history.push(HistoryRow {
                step: step + 1,
                loss: out.total,
                err: err(&eval_pop, &g)?,
                err_unsup: err_unsup(&eval_pop, &g)?,
                disagreement_pl: pl
                    .map(|p| crate::objectives::disagreement(&g, p.labeling(), pop.masses()))
                    .transpose()?,
                r_b_estimate: r_b_estimate(&net, pop, cfg.vat_radius, cfg.seed ^ 0xe7a1)?,
                tau_i: tau,
                ignored_fraction: ignored_since_eval.0 as f64 / ignored_since_eval.1.max(1) as f64,
            });
            ignored_since_eval = (0, 0);
        }
    }
    Ok(TrainOutcome { net, history, ema, balance_target })
}

// ---------------------------------------------------------------------------
// Readouts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_distance: f64,
    pub count: usize,
    pub corrected_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCurve {
    pub bins: Vec<CorrectionBin>,
    /// Rank correlation between bin mean distance and correction rate.
    pub spearman: Option<f64>,
    pub mistakes: usize,
}

/// Bins mistakenly pseudolabeled points by distance to the nearest correctly
/// pseudolabeled point of the same class (equal-count bins) and reports the
/// fraction the trained net classifies correctly.
pub fn distance_vs_correction(
    pop: &FinitePopulation,
    pl: &Pseudolabeler,
    net: &FeedforwardNet,
    bins: usize,
) -> Result<CorrectionCurve> {
    if bins == 0 {
        return Err(LabError::InvalidArgument("need at least one bin".into()));
    }
    let mut rows: Vec<(f64, bool)> = Vec::new();
    for &i in pl.mistakes() {
        let c = pop.labels()[i];
        let d = pop
            .class_members(c)
            .into_iter()
            .filter(|&j| pl.labeling().get(j) == c)
            .map(|j| dist(pop.point(i), pop.point(j)))
            .fold(f64::INFINITY, f64::min);
        rows.push((d, predict(net, pop.point(i))? == c));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = rows.len();
    let bins_used = bins.min(n.max(1));
    let mut out = Vec::new();
    for b in 0..bins_used {
        let (lo, hi) = (b * n / bins_used, (b + 1) * n / bins_used);
        if lo == hi {
            continue;
        }
        let chunk = &rows[lo..hi];
        out.push(CorrectionBin {
            lo: chunk[0].0,
            hi: chunk[chunk.len() - 1].0,
            mean_distance: chunk.iter().map(|r| r.0).sum::<f64>() / chunk.len() as f64,
            count: chunk.len(),
            corrected_rate: chunk.iter().filter(|r| r.1).count() as f64 / chunk.len() as f64,
        });
    }
    let xs: Vec<f64> = out.iter().map(|b| b.mean_distance).collect();
    let ys: Vec<f64> = out.iter().map(|b| b.corrected_rate).collect();
    Ok(CorrectionCurve { spearman: spearman(&xs, &ys), bins: out, mistakes: n })
}

/// Ground-truth accuracy of a net on a population.
pub fn accuracy(net: &FeedforwardNet, pop: &FinitePopulation) -> Result<f64> {
    let g = net_labeling(net, pop)?;
    let eval = if g.num_classes() == pop.num_classes() {
        pop.clone()
    } else {
        pop.relabeled(pop.labels().to_vec(), g.num_classes())?
    };
    Ok(1.0 - err(&eval, &g)?)
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec { hidden: vec![32, 32], activation: Activation::Softplus, init_scale: 1.0 }
    }
}

impl NetSpec {
    pub fn build(&self, input: usize, classes: usize, seed: u64) -> Result<FeedforwardNet> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        FeedforwardNet::random(&dims, self.activation, self.init_scale, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseSetup {
    pub n_per_class: usize,
    pub noise: f64,
    pub mistake_fraction: f64,
    pub bins: usize,
    pub net: NetSpec,
    pub train: TrainConfig,
}

impl Default for DenoiseSetup {
    fn default() -> Self {
        DenoiseSetup {
            n_per_class: 400,
            noise: 0.1,
            mistake_fraction: 0.2,
            bins: 5,
            net: NetSpec::default(),
            train: TrainConfig { steps: 3000, learning_rate: 0.2, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResult {
    pub seed: u64,
    pub pseudolabel_accuracy: f64,
    pub trained_accuracy: f64,
    pub curve: CorrectionCurve,
    pub history: Vec<HistoryRow>,
}

/// Two-moons with clustered pseudolabel noise, trained with the configured
/// components; reports accuracies and the distance/correction curve.
pub fn denoise_experiment(setup: &DenoiseSetup, seed: u64) -> Result<DenoiseResult> {
    let pop = gen_two_moons(setup.n_per_class, setup.noise, &[0.0, 0.0], seed)?;
    let pl = make_pseudolabeler(&pop, setup.mistake_fraction, &PseudolabelMode::Clustered, seed ^ 0x51)?;
    let net = setup.net.build(2, 2, seed ^ 0xa3)?;
    let cfg = TrainConfig { seed, ..setup.train.clone() };
    let out = train_pseudolabel(&net, &pop, &pl, &cfg)?;
    Ok(DenoiseResult {
        seed,
        pseudolabel_accuracy: 1.0 - err(&pop, pl.labeling())?,
        trained_accuracy: accuracy(&out.net, &pop)?,
        curve: distance_vs_correction(&pop, &pl, &out.net, setup.bins)?,
        history: out.history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSetup {
    pub n_per_class: usize,
    pub noise: f64,
    pub shift: Vec<f64>,
    pub net: NetSpec,
    /// Source training; its VAT/AMO/MinEnt switches are ignored.
    pub source_train: TrainConfig,
    pub train: TrainConfig,
}

impl Default for ShiftSetup {
    fn default() -> Self {
        ShiftSetup {
            n_per_class: 200,
            noise: 0.1,
            shift: vec![0.5, 0.0],
            net: NetSpec::default(),
            source_train: TrainConfig { steps: 600, ..TrainConfig::default() },
            train: TrainConfig { vat_radius: 0.1, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRun {
    pub seed: u64,
    pub pseudolabel_accuracy: f64,
    pub rungs: Vec<(Rung, f64)>,
}

/// Source-trained pseudolabeler on a shifted target copy, then each ladder
/// rung trained on the target from the same initialization.
pub fn shift_ladder(setup: &ShiftSetup, rungs: &[Rung], seed: u64) -> Result<ShiftRun> {
    let source = gen_two_moons(setup.n_per_class, setup.noise, &[0.0, 0.0], seed)?;
    let target = gen_two_moons(setup.n_per_class, setup.noise, &setup.shift, seed ^ 0x7a6)?;
    let src_net = setup.net.build(2, 2, seed ^ 0x11)?;
    let src_truth = Pseudolabeler::new(&source, Labeling::ground_truth(&source))?;
    let src_cfg = TrainConfig { seed, ..setup.source_train.rung(Rung::Pl) };
    let trained = train_pseudolabel(&src_net, &source, &src_truth, &src_cfg)?;
    let pl = Pseudolabeler::new(&target, net_labeling(&trained.net, &target)?)?;
    let init = setup.net.build(2, 2, seed ^ 0x22)?;
    let mut out = Vec::new();
    for &r in rungs {
        let cfg = TrainConfig { seed, ..setup.train.rung(r) };
        let res = train_pseudolabel(&init, &target, &pl, &cfg)?;
        out.push((r, accuracy(&res.net, &target)?));
    }
    Ok(ShiftRun { seed, pseudolabel_accuracy: 1.0 - err(&target, pl.labeling())?, rungs: out })
}
