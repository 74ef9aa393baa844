//! Multiplicative, additive and constant expansion: exhaustive certificates,
//! randomized witness search, and the conversions between the notions.
//!
//! Exhaustive enumeration splits the ground set in two halves and tabulates
//! neighborhood unions and masses for each half, so every subset costs one
//! bitwise OR plus a table-driven mass lookup.

use crate::dataspace::NeighborhoodGraph;
use crate::error::{LabError, Result};
use crate::stats::{normal_cdf, normal_quantile};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Largest ground set enumerated exhaustively (about 4M subsets).
pub const EXHAUSTIVE_CAP: usize = 22;

/// Tolerance for probability comparisons.
pub const MASS_TOL: f64 = 1e-12;

/// Local moves tried per random start in sampled mode.
const SAMPLED_MOVES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exhaustive,
    Sampled { budget: u64, seed: u64 },
}

impl SearchMode {
    fn label(&self) -> &'static str {
        match self {
            SearchMode::Exhaustive => "exhaustive",
            SearchMode::Sampled { .. } => "sampled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionKind {
    Multiplicative,
    Additive,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExpansionParams {
    Multiplicative { a: f64, c: f64 },
    Additive { q: f64, alpha: f64, target: Vec<usize> },
    Constant { q: f64, xi: f64 },
}

/// Verdict of an expansion check. `worst` is the smallest expansion ratio
/// (multiplicative) or slack (additive, constant) over the tested sets, and
/// `+∞` (serialized as `null`) when no set qualified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCertificate {
    pub kind: ExpansionKind,
    pub params: ExpansionParams,
    pub holds: bool,
    #[serde(with = "finite_or_null")]
    pub worst: f64,
    pub witness: Vec<usize>,
    pub mode: String,
    pub examined: u64,
}

impl ExpansionCertificate {
    pub fn is_exhaustive(&self) -> bool {
        self.mode == "exhaustive"
    }

    /// Re-evaluates the witness directly. For a failing certificate this
    /// returns `true` iff the witness violates the defining inequality.
    pub fn witness_violates(&self, graph: &NeighborhoodGraph) -> bool {
        match &self.params {
            ExpansionParams::Multiplicative { a, c } => {
                mult_violated_direct(graph, &self.witness, *a, *c).unwrap_or(false)
            }
            ExpansionParams::Additive { q, alpha, target } => {
                let (pv, out) = additive_masses(graph, target, &self.witness);
                pv > q + MASS_TOL && out - pv - alpha <= 0.0
            }
            ExpansionParams::Constant { q, xi } => constant_violated_direct(graph, &self.witness, *q, *xi),
        }
    }
}

pub(crate) mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

// ---------------------------------------------------------------------------
// Neighborhoods
// ---------------------------------------------------------------------------

fn check_set(graph: &NeighborhoodGraph, s: &[usize]) -> Result<()> {
    s.iter().try_for_each(|&i| graph.population().check_index(i))
}

/// `N(S)`: union of the overlap neighborhoods of the members of `S`.
pub fn neighborhood_of_set(graph: &NeighborhoodGraph, s: &[usize]) -> Result<Vec<usize>> {
    check_set(graph, s)?;
    let mut hit = vec![false; graph.len()];
    for &i in s {
        for &j in graph.n_neighbors(i) {
            hit[j] = true;
        }
    }
    Ok(collect_marked(&hit))
}

/// `N*(S) = ∪_i (N(S ∩ C_i) ∩ C_i)`.
pub fn restricted_neighborhood(graph: &NeighborhoodGraph, s: &[usize]) -> Result<Vec<usize>> {
    check_set(graph, s)?;
    let labels = graph.population().labels();
    let mut hit = vec![false; graph.len()];
    for &i in s {
        for &j in graph.n_neighbors(i) {
            if labels[j] == labels[i] {
                hit[j] = true;
            }
        }
    }
    Ok(collect_marked(&hit))
}

fn collect_marked(hit: &[bool]) -> Vec<usize> {
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

// ---------------------------------------------------------------------------
// Direct evaluation of single sets
// ---------------------------------------------------------------------------

/// `(P_i(V), P_i(N(V) ∩ C_i))` for `V` inside class `class`.
pub fn mult_masses(graph: &NeighborhoodGraph, class: usize, v: &[usize]) -> (f64, f64) {
    let pop = graph.population();
    let pi = pop.class_mass(class);
    let nv = restricted_neighborhood(graph, v).expect("indices checked by caller");
    let inside: Vec<usize> = nv.into_iter().filter(|&j| pop.labels()[j] == class).collect();
    (pop.mass_of(v) / pi, pop.mass_of(&inside) / pi)
}

fn mult_violated_direct(graph: &NeighborhoodGraph, v: &[usize], a: f64, c: f64) -> Option<bool> {
    let first = *v.first()?;
    let class = graph.population().labels()[first];
    if v.iter().any(|&i| graph.population().labels()[i] != class) {
        return None;
    }
    let (pv, pn) = mult_masses(graph, class, v);
    Some(pv <= a + MASS_TOL && pn < (c * pv).min(1.0) - MASS_TOL)
}

/// `(P(V), P(N*(V) \ S))`.
pub fn additive_masses(graph: &NeighborhoodGraph, s: &[usize], v: &[usize]) -> (f64, f64) {
    let pop = graph.population();
    let mut in_s = vec![false; graph.len()];
    s.iter().for_each(|&i| in_s[i] = true);
    let out: Vec<usize> = restricted_neighborhood(graph, v)
        .expect("indices checked by caller")
        .into_iter()
        .filter(|&j| !in_s[j])
        .collect();
    (pop.mass_of(v), pop.mass_of(&out))
}

/// `(P(S), P(N*(S) \ S), max_i P(S ∩ C_i)/P(C_i))`.
pub fn constant_masses(graph: &NeighborhoodGraph, s: &[usize]) -> (f64, f64, f64) {
    let pop = graph.population();
    let (ps, out) = additive_masses(graph, s, s);
    let class_mass = pop.class_masses();
    let mut share = vec![0.0; pop.num_classes()];
    for &i in s {
        share[pop.labels()[i]] += pop.masses()[i];
    }
    let worst_share = share.iter().zip(&class_mass).map(|(a, b)| a / b).fold(0.0, f64::max);
    (ps, out, worst_share)
}

fn constant_violated_direct(graph: &NeighborhoodGraph, s: &[usize], q: f64, xi: f64) -> bool {
    let (ps, out, share) = constant_masses(graph, s);
    ps >= q - MASS_TOL && share <= 0.5 + MASS_TOL && out < xi.min(ps) - MASS_TOL
}

// ---------------------------------------------------------------------------
// Exhaustive machinery
// ---------------------------------------------------------------------------

/// Mass of a bitset over a compressed universe via per-byte lookup tables.
struct UniverseMass {
    table: Vec<[f64; 256]>,
}

impl UniverseMass {
    fn new(masses: &[f64]) -> Self {
        let bytes = masses.len().div_ceil(8).max(1);
        let mut table = vec![[0.0; 256]; bytes.div_ceil(8) * 8];
        for (b, t) in table.iter_mut().enumerate() {
            for (v, slot) in t.iter_mut().enumerate() {
                *slot = (0..8).filter(|bit| v >> bit & 1 == 1).filter_map(|bit| masses.get(b * 8 + bit)).sum();
            }
        }
        UniverseMass { table }
    }

    #[inline]
    fn mass(&self, bits: &[u64]) -> f64 {
        let mut total = 0.0;
        for (w, &word) in bits.iter().enumerate() {
            if word == 0 {
                continue;
            }
            for byte in 0..8 {
                let v = (word >> (8 * byte)) & 0xff;
                if v != 0 {
                    total += self.table[w * 8 + byte][v as usize];
                }
            }
        }
        total
    }
}

fn words_for(n: usize) -> usize {
    n.div_ceil(64).max(1)
}

fn set_bit(bits: &mut [u64], i: usize) {
    bits[i / 64] |= 1 << (i % 64);
}

/// Half tables of neighborhood unions and masses.
struct HalfTables {
    bits: usize,
    words: usize,
    union: Vec<u64>,
    mass: Vec<f64>,
    class_mass: Vec<f64>,
    classes: usize,
}

impl HalfTables {
    fn build(nb: &[Vec<u64>], mass: &[f64], class: &[usize], classes: usize, words: usize) -> Self {
        let bits = nb.len();
        let size = 1usize << bits;
        let mut union = vec![0u64; size * words];
        let mut m = vec![0.0; size];
        let mut cm = vec![0.0; size * classes];
        for mask in 1..size {
            let low = mask.trailing_zeros() as usize;
            let rest = mask & (mask - 1);
            for w in 0..words {
                union[mask * words + w] = union[rest * words + w] | nb[low][w];
            }
            m[mask] = m[rest] + mass[low];
            for k in 0..classes {
                cm[mask * classes + k] = cm[rest * classes + k];
            }
            cm[mask * classes + class[low]] += mass[low];
        }
        HalfTables { bits, words, union, mass: m, class_mass: cm, classes }
    }

    fn union(&self, mask: usize) -> &[u64] {
        &self.union[mask * self.words..(mask + 1) * self.words]
    }

    fn class_mass(&self, mask: usize) -> &[f64] {
        &self.class_mass[mask * self.classes..(mask + 1) * self.classes]
    }
}

struct Ground {
    lo: HalfTables,
    hi: HalfTables,
    words: usize,
    universe: UniverseMass,
}

impl Ground {
    /// `nb[k]` is the neighborhood of ground item `k` as a universe bitset.
    fn new(nb: Vec<Vec<u64>>, mass: &[f64], class: &[usize], classes: usize, universe_mass: &[f64]) -> Self {
        let words = words_for(universe_mass.len());
        let split = nb.len() / 2;
        let lo = HalfTables::build(&nb[..split], &mass[..split], &class[..split], classes, words);
        let hi = HalfTables::build(&nb[split..], &mass[split..], &class[split..], classes, words);
        Ground { lo, hi, words, universe: UniverseMass::new(universe_mass) }
    }
}

/// Data handed to the per-subset evaluator.
struct SubsetView<'a> {
    mask: u64,
    mass: f64,
    union_mass: f64,
    union: &'a [u64],
    lo: usize,
    hi: usize,
}

#[derive(Clone, Copy)]
struct Outcome {
    worst: f64,
    violation: Option<f64>,
}

#[derive(Clone, Copy)]
struct Acc {
    examined: u64,
    worst: f64,
    worst_mask: u64,
    violation: f64,
    violation_mask: Option<u64>,
}

impl Acc {
    fn new() -> Self {
        Acc { examined: 0, worst: f64::INFINITY, worst_mask: 0, violation: f64::INFINITY, violation_mask: None }
    }

    fn push(&mut self, mask: u64, o: Outcome) {
        self.examined += 1;
        if o.worst < self.worst {
            self.worst = o.worst;
            self.worst_mask = mask;
        }
        if let Some(v) = o.violation {
            if self.violation_mask.is_none() || v < self.violation {
                self.violation = v;
                self.violation_mask = Some(mask);
            }
        }
    }

    fn merge(mut self, other: Acc) -> Acc {
        self.examined += other.examined;
        if other.worst < self.worst {
            self.worst = other.worst;
            self.worst_mask = other.worst_mask;
        }
        if let Some(m) = other.violation_mask {
            if self.violation_mask.is_none() || other.violation < self.violation {
                self.violation = other.violation;
                self.violation_mask = Some(m);
            }
        }
        self
    }
}

/// Visits every nonempty subset of the ground set.
fn scan<F>(g: &Ground, f: F) -> Acc
where
    F: Fn(&SubsetView) -> Option<Outcome> + Sync,
{
    let lo_size = 1usize << g.lo.bits;
    let hi_size = 1usize << g.hi.bits;
    let partial: Vec<Acc> = (0..hi_size)
        .into_par_iter()
        .map(|hi| {
            let mut acc = Acc::new();
            let mut union = vec![0u64; g.words];
            let hu = g.hi.union(hi);
            for lo in 0..lo_size {
                if hi == 0 && lo == 0 {
                    continue;
                }
                let lu = g.lo.union(lo);
                for w in 0..g.words {
                    union[w] = hu[w] | lu[w];
                }
                let mask = ((hi as u64) << g.lo.bits) | lo as u64;
                let view = SubsetView {
                    mask,
                    mass: g.hi.mass[hi] + g.lo.mass[lo],
                    union_mass: g.universe.mass(&union),
                    union: &union,
                    lo,
                    hi,
                };
                if let Some(o) = f(&view) {
                    acc.push(mask, o);
                }
            }
            acc
        })
        .collect();
    partial.into_iter().fold(Acc::new(), Acc::merge)
}

fn mask_to_indices(mask: u64, items: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = (0..items.len()).filter(|&k| mask >> k & 1 == 1).map(|k| items[k]).collect();
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// Multiplicative expansion
// ---------------------------------------------------------------------------

fn validate_mult(a: f64, c: f64) -> Result<()> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(LabError::InvalidArgument(format!("a = {a} must lie in (0, 1]")));
    }
    if !(c >= 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must be >= 1")));
    }
    Ok(())
}

/// Class-local ground set: members, class mass, and within-class
/// neighborhoods indexed by member position.
fn class_ground(graph: &NeighborhoodGraph, class: usize) -> (Vec<usize>, f64, Vec<Vec<usize>>) {
    let pop = graph.population();
    let members = pop.class_members(class);
    let mut pos = vec![usize::MAX; graph.len()];
    for (k, &i) in members.iter().enumerate() {
        pos[i] = k;
    }
    let nb = members
        .iter()
        .map(|&i| graph.n_neighbors(i).iter().filter(|&&j| pos[j] != usize::MAX).map(|&j| pos[j]).collect())
        .collect();
    (members, pop.class_mass(class), nb)
}

fn class_tables(graph: &NeighborhoodGraph, class: usize) -> Result<(Vec<usize>, f64, Ground)> {
    let (members, pi, nb) = class_ground(graph, class);
    if members.len() > EXHAUSTIVE_CAP {
        return Err(LabError::TooLarge { size: members.len(), cap: EXHAUSTIVE_CAP });
    }
    let masses: Vec<f64> = members.iter().map(|&i| graph.population().masses()[i]).collect();
    let words = words_for(members.len());
    let bits: Vec<Vec<u64>> = nb
        .iter()
        .map(|row| {
            let mut b = vec![0u64; words];
            row.iter().for_each(|&k| set_bit(&mut b, k));
            b
        })
        .collect();
    let zeros = vec![0; members.len()];
    Ok((members, pi, Ground::new(bits, &masses, &zeros, 1, &masses)))
}

/// Checks `P_i(N(V) ∩ C_i) ≥ min{c·P_i(V), 1}` for every class `i` and every
/// `V ⊆ C_i` with `P_i(V) ≤ a`.
pub fn check_mult_expansion(
    graph: &NeighborhoodGraph,
    a: f64,
    c: f64,
    mode: SearchMode,
) -> Result<ExpansionCertificate> {
    validate_mult(a, c)?;
    let params = ExpansionParams::Multiplicative { a, c };
    let k = graph.population().num_classes();
    match mode {
        SearchMode::Exhaustive => {
            let mut total = Acc::new();
            let mut worst_set = Vec::new();
            let mut viol_set = Vec::new();
            for class in 0..k {
                let (members, pi, ground) = class_tables(graph, class)?;
                let acc = scan(&ground, |v| {
                    let pv = v.mass / pi;
                    if pv > a + MASS_TOL {
                        return None;
                    }
                    let pn = v.union_mass / pi;
                    let ratio = v.union_mass / v.mass;
                    let violated = pn < (c * pv).min(1.0) - MASS_TOL;
                    Some(Outcome { worst: ratio, violation: violated.then_some(ratio) })
                });
                if acc.worst < total.worst {
                    worst_set = mask_to_indices(acc.worst_mask, &members);
                }
                if let Some(m) = acc.violation_mask {
                    if total.violation_mask.is_none() || acc.violation < total.violation {
                        viol_set = mask_to_indices(m, &members);
                    }
                }
                total = total.merge(acc);
            }
            let holds = total.violation_mask.is_none();
            Ok(ExpansionCertificate {
                kind: ExpansionKind::Multiplicative,
                params,
                holds,
                worst: total.worst,
                witness: if holds { worst_set } else { viol_set },
                mode: mode.label().into(),
                examined: total.examined,
            })
        }
        SearchMode::Sampled { budget, seed } => {
            let pop = graph.population();
            let classes: Vec<(Vec<usize>, f64)> = (0..k).map(|i| (pop.class_members(i), pop.class_mass(i))).collect();
            let eval = |v: &[usize]| -> Option<(f64, f64)> {
                let class = pop.labels()[v[0]];
                let (pv, pn) = mult_masses(graph, class, v);
                if pv > a + MASS_TOL {
                    return None;
                }
                Some((pn / pv, pn - (c * pv).min(1.0)))
            };
            let pools: Vec<Vec<usize>> = classes.into_iter().map(|(m, _)| m).collect();
            let found = sampled_search(graph, &pools, budget, seed, &eval);
            Ok(found.into_certificate(ExpansionKind::Multiplicative, params, mode))
        }
    }
}

/// Largest `c` for which `(a, c)`-multiplicative expansion holds (exhaustive).
/// Sets whose restricted neighborhood is the whole class never constrain
/// `c`; the result is `+∞` when no other set qualifies.
pub fn max_mult_factor(graph: &NeighborhoodGraph, a: f64) -> Result<(f64, Vec<usize>)> {
    validate_mult(a, 1.0)?;
    let mut best = f64::INFINITY;
    let mut witness = Vec::new();
    for class in 0..graph.population().num_classes() {
        let (members, pi, ground) = class_tables(graph, class)?;
        let acc = scan(&ground, |v| {
            if v.mass / pi > a + MASS_TOL || v.union_mass / pi >= 1.0 - MASS_TOL {
                return None;
            }
            Some(Outcome { worst: v.union_mass / v.mass, violation: None })
        });
        if acc.worst < best {
            best = acc.worst;
            witness = mask_to_indices(acc.worst_mask, &members);
        }
    }
    Ok((best, witness))
}

// ---------------------------------------------------------------------------
// Additive expansion
// ---------------------------------------------------------------------------

/// Checks `P(N*(V) \ S) > P(V) + α` for every `V ⊆ S` with `P(V) > q`.
pub fn check_additive_expansion(
    graph: &NeighborhoodGraph,
    s: &[usize],
    q: f64,
    alpha: f64,
    mode: SearchMode,
) -> Result<ExpansionCertificate> {
    check_set(graph, s)?;
    if !q.is_finite() || !alpha.is_finite() {
        return Err(LabError::InvalidArgument("q and alpha must be finite".into()));
    }
    let mut target = s.to_vec();
    target.sort_unstable();
    target.dedup();
    let params = ExpansionParams::Additive { q, alpha, target: target.clone() };
    match mode {
        SearchMode::Exhaustive => {
            let acc = additive_scan(graph, &target, |pv, out| {
                if pv <= q + MASS_TOL {
                    return None;
                }
                let slack = out - pv - alpha;
                Some(Outcome { worst: slack, violation: (slack <= 0.0).then_some(slack) })
            })?;
            let holds = acc.violation_mask.is_none();
            let mask = if holds { acc.worst_mask } else { acc.violation_mask.unwrap_or(0) };
            Ok(ExpansionCertificate {
                kind: ExpansionKind::Additive,
                params,
                holds,
                worst: acc.worst,
                witness: if acc.examined == 0 { Vec::new() } else { mask_to_indices(mask, &target) },
                mode: mode.label().into(),
                examined: acc.examined,
            })
        }
        SearchMode::Sampled { budget, seed } => {
            let eval = |v: &[usize]| -> Option<(f64, f64)> {
                let (pv, out) = additive_masses(graph, &target, v);
                if pv <= q + MASS_TOL {
                    return None;
                }
                let slack = out - pv - alpha;
                // strict inequality: zero slack is a violation
                Some((slack, if slack <= 0.0 { -f64::MIN_POSITIVE } else { slack }))
            };
            let found = sampled_search(graph, &[target.clone()], budget, seed, &eval);
            Ok(found.into_certificate(ExpansionKind::Additive, params, mode))
        }
    }
}

fn additive_scan<F>(graph: &NeighborhoodGraph, target: &[usize], f: F) -> Result<Acc>
where
    F: Fn(f64, f64) -> Option<Outcome> + Sync,
{
    if target.len() > EXHAUSTIVE_CAP {
        return Err(LabError::TooLarge { size: target.len(), cap: EXHAUSTIVE_CAP });
    }
    if target.is_empty() {
        return Ok(Acc::new());
    }
    let pop = graph.population();
    let mut in_s = vec![false; graph.len()];
    target.iter().for_each(|&i| in_s[i] = true);
    let outside = restricted_neighborhood(graph, target)?;
    let universe: Vec<usize> = outside.into_iter().filter(|&j| !in_s[j]).collect();
    let mut pos = vec![usize::MAX; graph.len()];
    for (k, &j) in universe.iter().enumerate() {
        pos[j] = k;
    }
    let words = words_for(universe.len());
    let nb: Vec<Vec<u64>> = target
        .iter()
        .map(|&i| {
            let mut b = vec![0u64; words];
            for &j in graph.n_neighbors(i) {
                if pos[j] != usize::MAX && pop.labels()[j] == pop.labels()[i] {
                    set_bit(&mut b, pos[j]);
                }
            }
            b
        })
        .collect();
    let masses: Vec<f64> = target.iter().map(|&i| pop.masses()[i]).collect();
    let umass: Vec<f64> = universe.iter().map(|&j| pop.masses()[j]).collect();
    let zeros = vec![0; target.len()];
    let ground = Ground::new(nb, &masses, &zeros, 1, &umass);
    Ok(scan(&ground, |v| f(v.mass, v.union_mass)))
}

/// Smallest `q` for which `(q, α)`-additive expansion holds on `S`, i.e. the
/// largest `P(V)` over sets violating the strict inequality (`0` if none).
pub fn min_additive_q(graph: &NeighborhoodGraph, s: &[usize], alpha: f64) -> Result<f64> {
    let acc = additive_scan(graph, s, |pv, out| {
        let slack = out - pv - alpha;
        (slack <= 0.0).then_some(Outcome { worst: -pv, violation: None })
    })?;
    Ok(if acc.examined == 0 { 0.0 } else { (-acc.worst).max(0.0) })
}

// ---------------------------------------------------------------------------
// Constant expansion
// ---------------------------------------------------------------------------

/// Checks `P(N*(S) \ S) ≥ min{ξ, P(S)}` for every `S` with `P(S) ≥ q` and
/// `P(S ∩ C_i) ≤ P(C_i)/2` for all `i`.
pub fn check_constant_expansion(
    graph: &NeighborhoodGraph,
    q: f64,
    xi: f64,
    mode: SearchMode,
) -> Result<ExpansionCertificate> {
    if !q.is_finite() || !(xi >= 0.0) {
        return Err(LabError::InvalidArgument("need finite q and xi >= 0".into()));
    }
    let params = ExpansionParams::Constant { q, xi };
    let pop = graph.population();
    let n = graph.len();
    let class_mass = pop.class_masses();
    let k = pop.num_classes();
    match mode {
        SearchMode::Exhaustive => {
            if n > EXHAUSTIVE_CAP {
                return Err(LabError::TooLarge { size: n, cap: EXHAUSTIVE_CAP });
            }
            let nb: Vec<Vec<u64>> = (0..n)
                .map(|i| {
                    let mut b = vec![0u64; 1];
                    for &j in graph.n_neighbors(i) {
                        if pop.labels()[j] == pop.labels()[i] {
                            set_bit(&mut b, j);
                        }
                    }
                    b
                })
                .collect();
            let ground = Ground::new(nb, pop.masses(), pop.labels(), k, pop.masses());
            let split = ground.lo.bits;
            let acc = scan(&ground, |v| {
                let ps = v.mass;
                if ps < q - MASS_TOL {
                    return None;
                }
                let lo_c = ground.lo.class_mass(v.lo);
                let hi_c = ground.hi.class_mass(v.hi);
                if (0..k).any(|i| (lo_c[i] + hi_c[i]) / class_mass[i] > 0.5 + MASS_TOL) {
                    return None;
                }
                let outside = [v.union[0] & !v.mask];
                let out = ground.universe.mass(&outside);
                let slack = out - xi.min(ps);
                debug_assert!(split <= 64);
                Some(Outcome { worst: slack, violation: (slack < -MASS_TOL).then_some(slack) })
            });
            let holds = acc.violation_mask.is_none();
            let items: Vec<usize> = (0..n).collect();
            let mask = if holds { acc.worst_mask } else { acc.violation_mask.unwrap_or(0) };
            Ok(ExpansionCertificate {
                kind: ExpansionKind::Constant,
                params,
                holds,
                worst: acc.worst,
                witness: if acc.examined == 0 { Vec::new() } else { mask_to_indices(mask, &items) },
                mode: mode.label().into(),
                examined: acc.examined,
            })
        }
        SearchMode::Sampled { budget, seed } => {
            let eval = |s: &[usize]| -> Option<(f64, f64)> {
                let (ps, out, share) = constant_masses(graph, s);
                if ps < q - MASS_TOL || share > 0.5 + MASS_TOL {
                    return None;
                }
                let slack = out - xi.min(ps);
                Some((slack, slack + MASS_TOL))
            };
            let pools = vec![(0..n).collect::<Vec<_>>()];
            let found = sampled_search(graph, &pools, budget, seed, &eval);
            Ok(found.into_certificate(ExpansionKind::Constant, params, mode))
        }
    }
}

// ---------------------------------------------------------------------------
// Randomized witness search
// ---------------------------------------------------------------------------

struct SampledResult {
    examined: u64,
    worst: f64,
    worst_set: Vec<usize>,
    violation: Option<(f64, Vec<usize>)>,
}

impl SampledResult {
    fn into_certificate(self, kind: ExpansionKind, params: ExpansionParams, mode: SearchMode) -> ExpansionCertificate {
        let holds = self.violation.is_none();
        let witness = match self.violation {
            Some((_, set)) => set,
            None => self.worst_set,
        };
        ExpansionCertificate {
            kind,
            params,
            holds,
            worst: self.worst,
            witness,
            mode: mode.label().into(),
            examined: self.examined,
        }
    }
}

/// Random starts grown along overlap edges, then first-improvement add/remove
/// moves that lower the margin. `eval` returns `(worst metric, margin)` for
/// qualifying sets; a negative margin is a violation.
fn sampled_search<F>(graph: &NeighborhoodGraph, pools: &[Vec<usize>], budget: u64, seed: u64, eval: &F) -> SampledResult
where
    F: Fn(&[usize]) -> Option<(f64, f64)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = SampledResult { examined: 0, worst: f64::INFINITY, worst_set: Vec::new(), violation: None };
    let pools: Vec<&Vec<usize>> = pools.iter().filter(|p| !p.is_empty()).collect();
    if pools.is_empty() {
        return res;
    }
    let record = |set: &[usize], out: (f64, f64), res: &mut SampledResult| {
        res.examined += 1;
        if out.0 < res.worst {
            res.worst = out.0;
            res.worst_set = sorted(set);
        }
        if out.1 < 0.0 && res.violation.as_ref().is_none_or(|(m, _)| out.1 < *m) {
            res.violation = Some((out.1, sorted(set)));
        }
    };
    // the budget counts candidate sets, including ones outside the constraint
    let mut spent = 0u64;
    while spent < budget {
        let pool = pools[rng.gen_range(0..pools.len())];
        let mut in_pool = vec![false; graph.len()];
        pool.iter().for_each(|&i| in_pool[i] = true);
        let size = rng.gen_range(1..=pool.len());
        let mut set = grow(graph, pool, &in_pool, size, &mut rng);
        spent += 1;
        let Some(mut cur) = eval(&set) else { continue };
        record(&set, cur, &mut res);
        for _ in 0..SAMPLED_MOVES {
            if spent >= budget {
                break;
            }
            let cand = pool[rng.gen_range(0..pool.len())];
            let mut next = set.clone();
            if let Some(p) = next.iter().position(|&x| x == cand) {
                if next.len() == 1 {
                    continue;
                }
                next.swap_remove(p);
            } else {
                next.push(cand);
            }
            spent += 1;
            if let Some(out) = eval(&next) {
                record(&next, out, &mut res);
                if out.1 < cur.1 {
                    cur = out;
                    set = next;
                }
            }
        }
    }
    res
}

/// Random connected-first set of `size` pool members grown from a random start.
fn grow(graph: &NeighborhoodGraph, pool: &[usize], in_pool: &[bool], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let start = pool[rng.gen_range(0..pool.len())];
    let mut taken = vec![false; graph.len()];
    let mut set = Vec::with_capacity(size);
    let mut frontier: Vec<usize> = Vec::new();
    let add = |i: usize, taken: &mut Vec<bool>, set: &mut Vec<usize>, frontier: &mut Vec<usize>| {
        taken[i] = true;
        set.push(i);
        frontier.extend(graph.n_neighbors(i).iter().copied().filter(|&j| in_pool[j] && !taken[j]));
    };
    add(start, &mut taken, &mut set, &mut frontier);
    let mut rest: Option<Vec<usize>> = None;
    while set.len() < size {
        let mut next = None;
        while !frontier.is_empty() {
            let j = frontier.swap_remove(rng.gen_range(0..frontier.len()));
            if !taken[j] {
                next = Some(j);
                break;
            }
        }
        let next = match next {
            Some(j) => j,
            None => {
                let r = rest.get_or_insert_with(|| pool.to_vec());
                r.retain(|&j| !taken[j]);
                match r.choose(rng) {
                    Some(&j) => j,
                    None => break,
                }
            }
        };
        add(next, &mut taken, &mut set, &mut frontier);
    }
    set
}

fn sorted(s: &[usize]) -> Vec<usize> {
    let mut v = s.to_vec();
    v.sort_unstable();
    v
}

// ---------------------------------------------------------------------------
// Conversions and the Gaussian profile
// ---------------------------------------------------------------------------

/// Multiplicative to additive expansion on a mistake set of mass `m`:
/// `q = β m/(c − 1)`, `α = (β − 1) m`.
pub fn mult_to_additive(c: f64, beta: f64, mistake_mass: f64) -> Result<(f64, f64)> {
    if !(c > 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must exceed 1")));
    }
    if !(beta > 0.0 && beta <= c - 1.0) {
        return Err(LabError::InvalidArgument(format!("beta = {beta} outside (0, c-1]")));
    }
    Ok((beta * mistake_mass / (c - 1.0), (beta - 1.0) * mistake_mass))
}

/// Multiplicative `(1/2, c)` expansion to `(ξ/(c − 1), ξ)` constant expansion.
pub fn mult_to_constant(c: f64, xi: f64) -> Result<f64> {
    if !(c > 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must exceed 1")));
    }
    if !(xi > 0.0) {
        return Err(LabError::InvalidArgument(format!("xi = {xi} must be positive")));
    }
    Ok(xi / (c - 1.0))
}

/// `Φ(Φ⁻¹(p) + σ)/p` for each `p`: the expansion of a Gaussian halfspace of
/// mass `p` enlarged by `σ` standard deviations.
pub fn halfspace_expansion_profile(sigma: f64, p_grid: &[f64]) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(LabError::InvalidArgument("enlargement must be >= 0".into()));
    }
    p_grid
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p <= 0.5) {
                return Err(LabError::InvalidArgument(format!("p = {p} outside (0, 0.5]")));
            }
            Ok(normal_cdf(normal_quantile(p) + sigma) / p)
        })
        .collect()
}
