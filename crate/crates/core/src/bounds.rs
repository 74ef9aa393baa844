//! Right-hand sides of the accuracy guarantees, mechanical checks of the
//! inequalities on finite instances, and the margin-based finite-sample terms.
//!
//! Every check first verifies its preconditions with exhaustive certificates.
//! An unmet precondition yields a refusal record, never a vacuous pass. Reports
//! carry the full instance so they can be re-verified without other context.

use crate::dataspace::{
    build_neighborhood_graph_with, measure_separation, FinitePopulation, NeighborhoodGraph, OverlapRule, TransformSpec,
};
use crate::error::{LabError, Result};
use crate::expansion::{
    check_additive_expansion, check_constant_expansion, check_mult_expansion, max_mult_factor, min_additive_q,
    mult_to_additive, mult_to_constant, ExpansionCertificate, ExpansionParams, SearchMode, MASS_TOL,
};
use crate::nets::FeedforwardNet;
use crate::objectives::{disagreement, err, err_unsup, robust_regularizer, unsup_feasible, Labeling, Pseudolabeler};
use crate::selftrain::{brute_force_min_pl, brute_force_min_unsup, MinimizerOptions};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A report holds iff `slack ≥ −HOLDS_TOL`.
pub const HOLDS_TOL: f64 = 1e-12;

/// Largest `K^n` enumerated by the all-labelings checks.
pub const LABELING_CAP: u64 = 20_000_000;

/// Floats that may be infinite or absent: numbers, `"inf"`, or `null` (NaN).
mod extended {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_none()
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(f64::NAN),
            Some(Repr::Num(v)) => Ok(v),
            Some(Repr::Tag(t)) if t == "inf" => Ok(f64::INFINITY),
            Some(Repr::Tag(t)) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Some(Repr::Tag(t)) => Err(serde::de::Error::custom(format!("unexpected float tag {t:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Closed-form right-hand sides
// ---------------------------------------------------------------------------

fn check_c(c: f64) -> Result<()> {
    if !(c > 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must exceed 1")));
    }
    Ok(())
}

/// `2/(c−1)·err_pl + 2c/(c−1)·μ`, with `c = ∞` giving `2μ`.
pub fn denoise_bound(c: f64, err_pl: f64, mu: f64) -> Result<f64> {
    check_c(c)?;
    let s = 2.0 / (c - 1.0);
    Ok(s * err_pl + (2.0 + s) * mu)
}

/// `max{c/(c−1), 2}·μ`, with `c = ∞` giving `2μ`.
pub fn unsup_bound(c: f64, mu: f64) -> Result<f64> {
    check_c(c)?;
    Ok((1.0 + 1.0 / (c - 1.0)).max(2.0) * mu)
}

/// `max{2/(c−1), 2}`, the balance factor of the unsupervised constraint.
fn balance_factor(c: f64) -> f64 {
    (2.0 / (c - 1.0)).max(2.0)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    /// `err(G) ≤ L(G)` for every labeling.
    LemmaPopDenoise,
    /// Minimizer of `L` against `2/(c−1)·err_pl + 2c/(c−1)·μ̂`.
    TheoremDenoise,
    /// Constrained minimizer of `R_B` against `max{c/(c−1), 2}·μ̂`.
    TheoremUnsup,
    /// `err_unsup(G) ≤ max{c/(c−1), 2}·R_B(G)` for every balanced labeling.
    LemmaUnsup,
    /// Additive-expansion error bound for labelings that fit the pseudolabels.
    TheoremAdditive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Holds,
    Violated,
    /// Preconditions unmet; no verdict.
    Refused,
    /// The labeling does not meet the hypothesis of the inequality.
    Skipped,
}

/// A finite instance: population, transformation set, overlap relation and
/// optional pseudolabels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub population: FinitePopulation,
    pub transform: TransformSpec,
    pub rule: OverlapRule,
    pub pseudolabels: Option<Labeling>,
}

impl Instance {
    pub fn graph(&self) -> Result<NeighborhoodGraph> {
        build_neighborhood_graph_with(&self.population, &self.transform, self.rule)
    }

    pub fn from_graph(graph: &NeighborhoodGraph, pl: Option<&Pseudolabeler>) -> Self {
        Instance {
            population: graph.population().clone(),
            transform: graph.transform().clone(),
            rule: graph.rule(),
            pseudolabels: pl.map(|p| p.labeling().clone()),
        }
    }

    pub fn pseudolabeler(&self) -> Result<Option<Pseudolabeler>> {
        self.pseudolabels.clone().map(|l| Pseudolabeler::new(&self.population, l)).transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    /// `kind/mode/params`, stable across runs.
    pub id: String,
    pub certificate: ExpansionCertificate,
}

impl CertificateRecord {
    fn new(certificate: ExpansionCertificate) -> Self {
        let params = match &certificate.params {
            ExpansionParams::Multiplicative { a, c } => format!("a={a},c={c}"),
            ExpansionParams::Additive { q, alpha, target } => format!("q={q},alpha={alpha},set={target:?}"),
            ExpansionParams::Constant { q, xi } => format!("q={q},xi={xi}"),
        };
        let kind = serde_json::to_value(certificate.kind).ok().and_then(|v| v.as_str().map(String::from));
        CertificateRecord { id: format!("{}/{}/{params}", kind.unwrap_or_default(), certificate.mode), certificate }
    }
}

/// Quantities the verdict depends on. Non-applicable entries are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputsDigest {
    #[serde(with = "extended")]
    pub c: f64,
    #[serde(with = "extended")]
    pub a_bar: f64,
    #[serde(with = "extended")]
    pub c_bar: f64,
    #[serde(with = "extended")]
    pub mu_hat: f64,
    #[serde(with = "extended")]
    pub err_pl: f64,
    /// `R_B` of the labeling the verdict is about.
    #[serde(with = "extended")]
    pub r_b: f64,
    /// Smallest ground-truth class mass.
    #[serde(with = "extended")]
    pub rho: f64,
    #[serde(with = "extended")]
    pub q: f64,
    #[serde(with = "extended")]
    pub alpha: f64,
    pub certificates: Vec<CertificateRecord>,
    pub instance: Instance,
    /// The labeling whose `lhs`, `rhs` are reported (the minimizer or the
    /// worst-slack labeling).
    pub labeling: Option<Labeling>,
}

impl InputsDigest {
    fn new(instance: Instance) -> Self {
        let nan = f64::NAN;
        InputsDigest {
            c: nan,
            a_bar: nan,
            c_bar: nan,
            mu_hat: nan,
            err_pl: nan,
            r_b: nan,
            rho: nan,
            q: nan,
            alpha: nan,
            certificates: Vec::new(),
            instance,
            labeling: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exactness {
    /// Whether the labeling search was exhaustive; `None` when no search ran.
    pub minimizer_exact: Option<bool>,
    pub expansion_exhaustive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub schema_version: u32,
    pub check: CheckId,
    pub status: Status,
    pub holds: bool,
    #[serde(with = "extended")]
    pub lhs: f64,
    #[serde(with = "extended")]
    pub rhs: f64,
    #[serde(with = "extended")]
    pub slack: f64,
    /// Set when any input was not computed exactly.
    pub advisory: bool,
    pub reason: Option<String>,
    pub exactness: Exactness,
    /// Labelings evaluated (all-labelings checks count those meeting the
    /// hypothesis).
    pub evaluated: u64,
    pub inputs: InputsDigest,
}

impl TheoremCheckReport {
    fn blank(check: CheckId, inputs: InputsDigest) -> Self {
        TheoremCheckReport {
            schema_version: REPORT_SCHEMA_VERSION,
            check,
            status: Status::Refused,
            holds: false,
            lhs: f64::NAN,
            rhs: f64::NAN,
            slack: f64::NAN,
            advisory: false,
            reason: None,
            exactness: Exactness { minimizer_exact: None, expansion_exhaustive: true },
            evaluated: 0,
            inputs,
        }
    }

    fn refuse(mut self, reason: impl Into<String>) -> Self {
        self.status = Status::Refused;
        self.holds = false;
        self.reason = Some(reason.into());
        self
    }

    fn skip(mut self, reason: impl Into<String>) -> Self {
        self.status = Status::Skipped;
        self.holds = false;
        self.reason = Some(reason.into());
        self
    }

    fn verdict(mut self, lhs: f64, rhs: f64) -> Self {
        self.lhs = lhs;
        self.rhs = rhs;
        self.slack = rhs - lhs;
        self.holds = self.slack >= -HOLDS_TOL;
        self.status = if self.holds { Status::Holds } else { Status::Violated };
        self.advisory = self.exactness.minimizer_exact == Some(false) || !self.exactness.expansion_exhaustive;
        self
    }

    /// One JSON line, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports always serialize")
    }
}

/// Parses a JSON-lines report stream, skipping blank lines.
pub fn parse_reports(text: &str) -> Result<Vec<TheoremCheckReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let r: TheoremCheckReport = serde_json::from_str(l)
                .map_err(|e| LabError::InvalidArgument(format!("report line {}: {e}", i + 1)))?;
            if r.schema_version != REPORT_SCHEMA_VERSION {
                return Err(LabError::InvalidArgument(format!(
                    "report line {}: schema version {} (expected {REPORT_SCHEMA_VERSION})",
                    i + 1,
                    r.schema_version
                )));
            }
            Ok(r)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Preconditions
// ---------------------------------------------------------------------------

fn require_witnessed(graph: &NeighborhoodGraph) -> std::result::Result<(), String> {
    if graph.rule() == OverlapRule::Witnessed {
        Ok(())
    } else {
        Err("exact checks need the witnessed overlap relation".into())
    }
}

/// `(ā, c̄)` expansion with `ā < 1/3`, `c̄ > 3`, and `c = min{1/ā, c̄}`.
struct DenoisePre {
    c_bar: f64,
    c: f64,
    certificates: Vec<CertificateRecord>,
}

fn denoise_preconditions(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    c_bar: Option<f64>,
) -> std::result::Result<DenoisePre, (String, Vec<CertificateRecord>)> {
    require_witnessed(graph).map_err(|r| (r, Vec::new()))?;
    let a_bar = pl.a_bar();
    if !(a_bar < 1.0 / 3.0) {
        return Err((format!("ā = {a_bar} is not below 1/3"), Vec::new()));
    }
    if a_bar <= 0.0 {
        // no nonempty set has mass ≤ 0, so expansion holds for every c̄
        let c_bar = c_bar.unwrap_or(f64::INFINITY);
        return Ok(DenoisePre { c_bar, c: c_bar, certificates: Vec::new() });
    }
    let c_bar = match c_bar {
        Some(c) => c,
        None => max_mult_factor(graph, a_bar).map_err(|e| (format!("no certificate: {e}"), Vec::new()))?.0,
    };
    if !(c_bar > 3.0) {
        return Err((format!("c̄ = {c_bar} is not above 3"), Vec::new()));
    }
    let cert = check_mult_expansion(graph, a_bar, c_bar, SearchMode::Exhaustive)
        .map_err(|e| (format!("no certificate: {e}"), Vec::new()))?;
    let holds = cert.holds;
    let certificates = vec![CertificateRecord::new(cert)];
    if !holds {
        return Err((format!("({a_bar}, {c_bar})-expansion fails"), certificates));
    }
    Ok(DenoisePre { c_bar, c: (1.0 / a_bar).min(c_bar), certificates })
}

/// `(1/2, c)` expansion with `c > 1`, and `ρ > max{2/(c−1), 2}·μ̂`.
struct UnsupPre {
    c: f64,
    certificates: Vec<CertificateRecord>,
}

fn unsup_preconditions(
    graph: &NeighborhoodGraph,
    c: Option<f64>,
    mu: f64,
) -> std::result::Result<UnsupPre, (String, Vec<CertificateRecord>)> {
    require_witnessed(graph).map_err(|r| (r, Vec::new()))?;
    let c = match c {
        Some(c) => c,
        None => max_mult_factor(graph, 0.5).map_err(|e| (format!("no certificate: {e}"), Vec::new()))?.0,
    };
    if !(c > 1.0) {
        return Err((format!("c = {c} is not above 1"), Vec::new()));
    }
    let cert = check_mult_expansion(graph, 0.5, c, SearchMode::Exhaustive)
        .map_err(|e| (format!("no certificate: {e}"), Vec::new()))?;
    let holds = cert.holds;
    let certificates = vec![CertificateRecord::new(cert)];
    if !holds {
        return Err((format!("(1/2, {c})-expansion fails"), certificates));
    }
    let rho = graph.population().min_class_mass();
    if !(rho > balance_factor(c) * mu) {
        return Err((
            format!("ρ = {rho} is not above {}·μ̂ = {}", balance_factor(c), balance_factor(c) * mu),
            certificates,
        ));
    }
    Ok(UnsupPre { c, certificates })
}

// ---------------------------------------------------------------------------
// Labeling enumeration
// ---------------------------------------------------------------------------

/// Per-labeling masses, computed directly from the graph.
struct Tally<'a> {
    graph: &'a NeighborhoodGraph,
    masses: &'a [f64],
    truth: &'a [usize],
    k: usize,
    perms: Vec<Vec<usize>>,
}

impl<'a> Tally<'a> {
    fn new(graph: &'a NeighborhoodGraph) -> Self {
        let pop = graph.population();
        let k = pop.num_classes();
        Tally { graph, masses: pop.masses(), truth: pop.labels(), k, perms: permutations(k) }
    }

    fn robust(&self, g: &[usize], i: usize) -> bool {
        self.graph.b_neighbors(i).iter().all(|&j| g[j] == g[i])
    }

    fn err(&self, g: &[usize]) -> f64 {
        (0..g.len()).filter(|&i| g[i] != self.truth[i]).map(|i| self.masses[i]).fold(0.0, |s, m| s + m)
    }

    fn l01(&self, g: &[usize], pl: &[usize]) -> f64 {
        (0..g.len()).filter(|&i| g[i] != pl[i]).map(|i| self.masses[i]).fold(0.0, |s, m| s + m)
    }

    fn r_b(&self, g: &[usize]) -> f64 {
        (0..g.len()).filter(|&i| !self.robust(g, i)).map(|i| self.masses[i]).fold(0.0, |s, m| s + m)
    }

    /// `P(G ≠ G_pl or x ∉ S_B(G))`.
    fn misfit(&self, g: &[usize], pl: &[usize]) -> f64 {
        (0..g.len()).filter(|&i| g[i] != pl[i] || !self.robust(g, i)).map(|i| self.masses[i]).fold(0.0, |s, m| s + m)
    }

    fn min_class_mass(&self, g: &[usize]) -> f64 {
        let mut cm = vec![0.0; self.k];
        for (&c, &m) in g.iter().zip(self.masses) {
            cm[c] += m;
        }
        cm.into_iter().fold(f64::INFINITY, f64::min)
    }

    fn err_unsup(&self, g: &[usize]) -> f64 {
        let mut a = vec![vec![0.0; self.k]; self.k];
        for i in 0..g.len() {
            a[g[i]][self.truth[i]] += self.masses[i];
        }
        let total: f64 = self.masses.iter().sum();
        self.perms
            .iter()
            .map(|p| (total - p.iter().enumerate().map(|(r, &t)| a[r][t]).sum::<f64>()).max(0.0))
            .fold(f64::INFINITY, f64::min)
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

#[derive(Clone, Copy, Debug)]
struct Worst {
    slack: f64,
    lhs: f64,
    rhs: f64,
    index: u64,
}

/// Smallest `rhs − lhs` over all `K^n` labelings (point 0 most significant),
/// lowest index on ties. `eval` returns `None` for labelings outside the
/// hypothesis. Also returns the number of labelings that met it.
fn worst_over_labelings<F>(k: usize, n: usize, eval: F) -> Result<(Option<Worst>, u64)>
where
    F: Fn(&[usize]) -> Option<(f64, f64)> + Sync,
{
    let total = (k as u64)
        .checked_pow(n as u32)
        .filter(|&t| t <= LABELING_CAP)
        .ok_or_else(|| LabError::BudgetExceeded(format!("{k}^{n} labelings exceed {LABELING_CAP}")))?;
    let chunk = (total / 256).max(4096);
    let parts: Vec<(Option<Worst>, u64)> = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(total);
            let mut g = decode(lo, k, n);
            let mut worst: Option<Worst> = None;
            let mut met = 0u64;
            for idx in lo..hi {
                if let Some((lhs, rhs)) = eval(&g) {
                    met += 1;
                    let slack = rhs - lhs;
                    if worst.is_none_or(|w| slack < w.slack) {
                        worst = Some(Worst { slack, lhs, rhs, index: idx });
                    }
                }
                for d in (0..n).rev() {
                    g[d] += 1;
                    if g[d] < k {
                        break;
                    }
                    g[d] = 0;
                }
            }
            (worst, met)
        })
        .collect();
    let mut worst: Option<Worst> = None;
    let mut met = 0;
    for (w, m) in parts {
        met += m;
        if let Some(w) = w {
            if worst.is_none_or(|b| w.slack < b.slack) {
                worst = Some(w);
            }
        }
    }
    Ok((worst, met))
}

fn decode(mut idx: u64, k: usize, n: usize) -> Vec<usize> {
    let mut g = vec![0; n];
    for d in (0..n).rev() {
        g[d] = (idx % k as u64) as usize;
        idx /= k as u64;
    }
    g
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

fn pl_digest(graph: &NeighborhoodGraph, pl: &Pseudolabeler) -> Result<InputsDigest> {
    let mut d = InputsDigest::new(Instance::from_graph(graph, Some(pl)));
    d.a_bar = pl.a_bar();
    d.mu_hat = measure_separation(graph);
    d.err_pl = err(graph.population(), pl.labeling())?;
    d.rho = graph.population().min_class_mass();
    Ok(d)
}

/// `err(G) ≤ L(G)` over all `K^n` labelings; reports the worst-slack one.
/// `c_bar` defaults to the largest certified factor at `ā`.
pub fn check_lemma_pop_denoise(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    c_bar: Option<f64>,
) -> Result<TheoremCheckReport> {
    let mut digest = pl_digest(graph, pl)?;
    let pre = match denoise_preconditions(graph, pl, c_bar) {
        Ok(p) => p,
        Err((reason, certs)) => {
            digest.certificates = certs;
            return Ok(TheoremCheckReport::blank(CheckId::LemmaPopDenoise, digest).refuse(reason));
        }
    };
    digest.c_bar = pre.c_bar;
    digest.c = pre.c;
    digest.certificates = pre.certificates;
    let tally = Tally::new(graph);
    let pl_labels = pl.labeling().assignment();
    let e = digest.err_pl;
    let s = 2.0 / (pre.c - 1.0);
    let pop = graph.population();
    let scan = worst_over_labelings(pop.num_classes(), pop.len(), |g| {
        let value = (1.0 + s) * tally.l01(g, pl_labels) + (2.0 + s) * tally.r_b(g) - e;
        Some((tally.err(g), value))
    });
    let report = TheoremCheckReport::blank(CheckId::LemmaPopDenoise, digest);
    let (worst, met) = match scan {
        Ok(v) => v,
        Err(e) => return Ok(report.refuse(format!("enumeration unavailable: {e}"))),
    };
    let w = worst.expect("every labeling qualifies");
    let g = decode(w.index, pop.num_classes(), pop.len());
    let mut report = report;
    report.inputs.r_b = tally.r_b(&g);
    report.inputs.labeling = Some(Labeling::new(g, pop.num_classes())?);
    report.exactness.minimizer_exact = Some(true);
    report.evaluated = met;
    Ok(report.verdict(w.lhs, w.rhs))
}

/// Error of the global minimizer of `L` against `denoise_bound(c, err_pl, μ̂)`.
pub fn check_theorem_denoise(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    c_bar: Option<f64>,
    opt: &MinimizerOptions,
) -> Result<TheoremCheckReport> {
    let mut digest = pl_digest(graph, pl)?;
    let pre = match denoise_preconditions(graph, pl, c_bar) {
        Ok(p) => p,
        Err((reason, certs)) => {
            digest.certificates = certs;
            return Ok(TheoremCheckReport::blank(CheckId::TheoremDenoise, digest).refuse(reason));
        }
    };
    digest.c_bar = pre.c_bar;
    digest.c = pre.c;
    digest.certificates = pre.certificates;
    let min = brute_force_min_pl(graph, pl, pre.c, opt)?;
    let g = min.labeling.expect("unconstrained minimizer exists");
    let lhs = err(graph.population(), &g)?;
    let rhs = denoise_bound(pre.c, digest.err_pl, digest.mu_hat)?;
    digest.r_b = robust_regularizer(graph, &g)?;
    digest.labeling = Some(g);
    let mut report = TheoremCheckReport::blank(CheckId::TheoremDenoise, digest);
    report.exactness.minimizer_exact = Some(min.exact);
    report.evaluated = min.evaluated;
    Ok(report.verdict(lhs, rhs))
}

fn unsup_digest(graph: &NeighborhoodGraph) -> InputsDigest {
    let mut d = InputsDigest::new(Instance::from_graph(graph, None));
    d.mu_hat = measure_separation(graph);
    d.rho = graph.population().min_class_mass();
    d
}

/// `err_unsup` of the constrained minimizer of `R_B` against
/// `unsup_bound(c, μ̂)`. `c` defaults to the largest certified factor at 1/2.
pub fn check_theorem_unsup(
    graph: &NeighborhoodGraph,
    c: Option<f64>,
    opt: &MinimizerOptions,
) -> Result<TheoremCheckReport> {
    let mut digest = unsup_digest(graph);
    let pre = match unsup_preconditions(graph, c, digest.mu_hat) {
        Ok(p) => p,
        Err((reason, certs)) => {
            digest.certificates = certs;
            return Ok(TheoremCheckReport::blank(CheckId::TheoremUnsup, digest).refuse(reason));
        }
    };
    digest.c = pre.c;
    digest.certificates = pre.certificates;
    let min = brute_force_min_unsup(graph, pre.c, opt)?;
    let mut report = TheoremCheckReport::blank(CheckId::TheoremUnsup, digest);
    report.exactness.minimizer_exact = Some(min.exact);
    report.evaluated = min.evaluated;
    let Some(g) = min.labeling else {
        // the ground truth is feasible here, so only an inexact search gets here
        report.advisory = true;
        return Ok(report.refuse("no feasible labeling found"));
    };
    let lhs = err_unsup(graph.population(), &g)?;
    let rhs = unsup_bound(pre.c, report.inputs.mu_hat)?;
    report.inputs.r_b = robust_regularizer(graph, &g)?;
    report.inputs.labeling = Some(g);
    Ok(report.verdict(lhs, rhs))
}

/// `err_unsup(G) ≤ max{c/(c−1), 2}·R_B(G)` over every labeling with
/// `min_y P(G = y) > max{2/(c−1), 2}·R_B(G)`.
pub fn check_lemma_unsup(graph: &NeighborhoodGraph, c: Option<f64>) -> Result<TheoremCheckReport> {
    let mut digest = unsup_digest(graph);
    let pre = match unsup_preconditions(graph, c, 0.0) {
        Ok(p) => p,
        Err((reason, certs)) => {
            digest.certificates = certs;
            return Ok(TheoremCheckReport::blank(CheckId::LemmaUnsup, digest).refuse(reason));
        }
    };
    digest.c = pre.c;
    digest.certificates = pre.certificates;
    let tally = Tally::new(graph);
    let factor = balance_factor(pre.c);
    let bound = (1.0 + 1.0 / (pre.c - 1.0)).max(2.0);
    let pop = graph.population();
    let scan = worst_over_labelings(pop.num_classes(), pop.len(), |g| {
        let rb = tally.r_b(g);
        (tally.min_class_mass(g) - factor * rb > 0.0).then(|| (tally.err_unsup(g), bound * rb))
    });
    let mut report = TheoremCheckReport::blank(CheckId::LemmaUnsup, digest);
    let (worst, met) = match scan {
        Ok(v) => v,
        Err(e) => return Ok(report.refuse(format!("enumeration unavailable: {e}"))),
    };
    report.exactness.minimizer_exact = Some(true);
    report.evaluated = met;
    let Some(w) = worst else {
        return Ok(report.skip("no labeling meets the balance constraint"));
    };
    let g = decode(w.index, pop.num_classes(), pop.len());
    report.inputs.r_b = tally.r_b(&g);
    report.inputs.labeling = Some(Labeling::new(g, pop.num_classes())?);
    Ok(report.verdict(w.lhs, w.rhs))
}

fn additive_pre(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    q: f64,
    alpha: f64,
    digest: &mut InputsDigest,
) -> Result<Option<String>> {
    digest.q = q;
    digest.alpha = alpha;
    if let Err(r) = require_witnessed(graph) {
        return Ok(Some(r));
    }
    let cert = match check_additive_expansion(graph, pl.mistakes(), q, alpha, SearchMode::Exhaustive) {
        Ok(c) => c,
        Err(e) => return Ok(Some(format!("no certificate: {e}"))),
    };
    let holds = cert.holds;
    digest.certificates = vec![CertificateRecord::new(cert)];
    Ok((!holds).then(|| format!("({q}, {alpha})-additive expansion on the mistake set fails")))
}

/// Additive-expansion bound for one labeling `G`: if
/// `P(G ≠ G_pl or x ∉ S_B(G)) ≤ err_pl + α` then
/// `err(G) ≤ 2(q + R_B(G)) + L_{0−1}(G, G_pl) − err_pl`.
pub fn check_theorem_additive(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    q: f64,
    alpha: f64,
    g: &Labeling,
) -> Result<TheoremCheckReport> {
    g.check_len(graph.len())?;
    let mut digest = pl_digest(graph, pl)?;
    let refusal = additive_pre(graph, pl, q, alpha, &mut digest)?;
    let tally = Tally::new(graph);
    let pl_labels = pl.labeling().assignment();
    digest.r_b = tally.r_b(g.assignment());
    digest.labeling = Some(g.clone());
    let report = TheoremCheckReport::blank(CheckId::TheoremAdditive, digest);
    if let Some(r) = refusal {
        return Ok(report.refuse(r));
    }
    let misfit = tally.misfit(g.assignment(), pl_labels);
    let e = report.inputs.err_pl;
    if misfit > e + alpha + MASS_TOL {
        return Ok(report.skip(format!("misfit {misfit} exceeds err_pl + α = {}", e + alpha)));
    }
    let rhs = 2.0 * (q + report.inputs.r_b) + tally.l01(g.assignment(), pl_labels) - e;
    let lhs = tally.err(g.assignment());
    let mut report = report;
    report.evaluated = 1;
    Ok(report.verdict(lhs, rhs))
}

/// [`check_theorem_additive`] over every labeling meeting the hypothesis;
/// reports the worst slack.
pub fn check_theorem_additive_all(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    q: f64,
    alpha: f64,
) -> Result<TheoremCheckReport> {
    let mut digest = pl_digest(graph, pl)?;
    let refusal = additive_pre(graph, pl, q, alpha, &mut digest)?;
    let mut report = TheoremCheckReport::blank(CheckId::TheoremAdditive, digest);
    if let Some(r) = refusal {
        return Ok(report.refuse(r));
    }
    let tally = Tally::new(graph);
    let pl_labels = pl.labeling().assignment();
    let e = report.inputs.err_pl;
    let pop = graph.population();
    let scan = worst_over_labelings(pop.num_classes(), pop.len(), |g| {
        if tally.misfit(g, pl_labels) > e + alpha + MASS_TOL {
            return None;
        }
        Some((tally.err(g), 2.0 * (q + tally.r_b(g)) + tally.l01(g, pl_labels) - e))
    });
    let (worst, met) = match scan {
        Ok(v) => v,
        Err(e) => return Ok(report.refuse(format!("enumeration unavailable: {e}"))),
    };
    report.exactness.minimizer_exact = Some(true);
    report.evaluated = met;
    let Some(w) = worst else {
        return Ok(report.skip("no labeling meets the fit hypothesis"));
    };
    let g = decode(w.index, pop.num_classes(), pop.len());
    report.inputs.r_b = tally.r_b(&g);
    report.inputs.labeling = Some(Labeling::new(g, pop.num_classes())?);
    Ok(report.verdict(w.lhs, w.rhs))
}

// ---------------------------------------------------------------------------
// Re-verification
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reverification {
    pub consistent: bool,
    pub problems: Vec<String>,
}

fn close(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a == b || (a - b).abs() <= HOLDS_TOL
}

/// Recomputes a report from its digest: the graph, `μ̂`, `err_pl`, every
/// recorded certificate, and `lhs`, `rhs`, `holds` for the recorded labeling.
/// Refused and skipped reports are checked for their certificates only.
pub fn reverify(report: &TheoremCheckReport) -> Result<Reverification> {
    let mut problems = Vec::new();
    let d = &report.inputs;
    let graph = d.instance.graph()?;
    let pl = d.instance.pseudolabeler()?;
    let mu = measure_separation(&graph);
    if !close(mu, d.mu_hat) {
        problems.push(format!("μ̂ {} recomputes to {mu}", d.mu_hat));
    }
    if let Some(pl) = &pl {
        let e = err(graph.population(), pl.labeling())?;
        if !close(e, d.err_pl) {
            problems.push(format!("err_pl {} recomputes to {e}", d.err_pl));
        }
        if !close(pl.a_bar(), d.a_bar) {
            problems.push(format!("ā {} recomputes to {}", d.a_bar, pl.a_bar()));
        }
    }
    for rec in &d.certificates {
        let cert = &rec.certificate;
        let mode = SearchMode::Exhaustive;
        let again = match &cert.params {
            ExpansionParams::Multiplicative { a, c } => check_mult_expansion(&graph, *a, *c, mode)?,
            ExpansionParams::Additive { q, alpha, target } => {
                check_additive_expansion(&graph, target, *q, *alpha, mode)?
            }
            ExpansionParams::Constant { q, xi } => check_constant_expansion(&graph, *q, *xi, mode)?,
        };
        if again.holds != cert.holds {
            problems.push(format!("certificate {} recomputes to holds = {}", rec.id, again.holds));
        }
    }
    if matches!(report.status, Status::Holds | Status::Violated) {
        let g = d.labeling.as_ref().ok_or_else(|| LabError::InvalidArgument("verdict without a labeling".into()))?;
        let need_pl = || pl.as_ref().ok_or_else(|| LabError::InvalidArgument("check needs pseudolabels".into()));
        let pop = graph.population();
        let rb = robust_regularizer(&graph, g)?;
        if !close(rb, d.r_b) {
            problems.push(format!("R_B {} recomputes to {rb}", d.r_b));
        }
        let c_from_certs = || -> f64 {
            d.certificates
                .iter()
                .find_map(|r| match r.certificate.params {
                    ExpansionParams::Multiplicative { c, .. } => Some(c),
                    _ => None,
                })
                .unwrap_or(d.c_bar)
        };
        let (lhs, rhs) = match report.check {
            CheckId::LemmaPopDenoise | CheckId::TheoremDenoise => {
                let pl = need_pl()?;
                let c = if pl.a_bar() > 0.0 { (1.0 / pl.a_bar()).min(c_from_certs()) } else { d.c_bar };
                if !close(c, d.c) {
                    problems.push(format!("c {} recomputes to {c}", d.c));
                }
                let e = err(pop, pl.labeling())?;
                let rhs = if report.check == CheckId::LemmaPopDenoise {
                    let s = 2.0 / (c - 1.0);
                    (1.0 + s) * disagreement(g, pl.labeling(), pop.masses())? + (2.0 + s) * rb - e
                } else {
                    denoise_bound(c, e, mu)?
                };
                (err(pop, g)?, rhs)
            }
            CheckId::TheoremUnsup => (err_unsup(pop, g)?, unsup_bound(c_from_certs(), mu)?),
            CheckId::LemmaUnsup => {
                let c = c_from_certs();
                if !unsup_feasible(&graph, g, c)?.feasible {
                    problems.push("recorded labeling violates the balance constraint".into());
                }
                (err_unsup(pop, g)?, unsup_bound(c, rb)?)
            }
            CheckId::TheoremAdditive => {
                let pl = need_pl()?;
                let e = err(pop, pl.labeling())?;
                let l01 = disagreement(g, pl.labeling(), pop.masses())?;
                let tally = Tally::new(&graph);
                if tally.misfit(g.assignment(), pl.labeling().assignment()) > e + d.alpha + MASS_TOL {
                    problems.push("recorded labeling violates the fit hypothesis".into());
                }
                (err(pop, g)?, 2.0 * (d.q + rb) + l01 - e)
            }
        };
        if !close(lhs, report.lhs) || !close(rhs, report.rhs) {
            problems.push(format!("(lhs, rhs) = ({}, {}) recomputes to ({lhs}, {rhs})", report.lhs, report.rhs));
        }
        if (rhs - lhs >= -HOLDS_TOL) != report.holds {
            problems.push("holds flag disagrees with recomputed slack".into());
        }
    }
    Ok(Reverification { consistent: problems.is_empty(), problems })
}

// ---------------------------------------------------------------------------
// Conversion lemmas
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionId {
    MultToAdditive,
    MultToConstant,
}

/// A premise certificate and the certificate it implies. Holds unless the
/// premise holds and the derived certificate fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub lemma: ConversionId,
    pub class: Option<usize>,
    /// `β` for the additive conversion, `ξ` for the constant one.
    pub parameter: f64,
    pub premise: CertificateRecord,
    pub derived: CertificateRecord,
    pub holds: bool,
}

/// Additive expansion on each class's mistake set derived from the
/// `(ā, c̄)` certificate, for `β = (c−1)·j/steps`, `j = 1..=steps`. Masses are
/// rescaled by the class mass since the derived statement is class-conditional.
pub fn check_mult_to_additive(
    graph: &NeighborhoodGraph,
    pl: &Pseudolabeler,
    c_bar: f64,
    steps: usize,
) -> Result<Vec<ConversionReport>> {
    let a_bar = pl.a_bar();
    if !(a_bar > 0.0) {
        return Ok(Vec::new());
    }
    let premise = CertificateRecord::new(check_mult_expansion(graph, a_bar, c_bar, SearchMode::Exhaustive)?);
    let c = (1.0 / a_bar).min(c_bar);
    if !(c > 1.0) {
        return Err(LabError::InvalidArgument(format!("c = {c} must exceed 1")));
    }
    let pop = graph.population();
    let mut out = Vec::new();
    for class in 0..pop.num_classes() {
        let m = pl.class_mistakes(class);
        if m.is_empty() {
            continue;
        }
        let pi = pop.class_mass(class);
        let mistake = pl.class_error()[class];
        for j in 1..=steps {
            let beta = (c - 1.0) * j as f64 / steps as f64;
            let (q, alpha) = mult_to_additive(c, beta, mistake)?;
            let derived =
                CertificateRecord::new(check_additive_expansion(graph, m, pi * q, pi * alpha, SearchMode::Exhaustive)?);
            let holds = !premise.certificate.holds || derived.certificate.holds;
            out.push(ConversionReport {
                lemma: ConversionId::MultToAdditive,
                class: Some(class),
                parameter: beta,
                premise: premise.clone(),
                derived,
                holds,
            });
        }
    }
    Ok(out)
}

/// Constant expansion `(ξ/(c−1), ξ)` derived from the `(1/2, c)` certificate
/// for each `ξ` in `xis`.
pub fn check_mult_to_constant(graph: &NeighborhoodGraph, c: f64, xis: &[f64]) -> Result<Vec<ConversionReport>> {
    let premise = CertificateRecord::new(check_mult_expansion(graph, 0.5, c, SearchMode::Exhaustive)?);
    xis.iter()
        .map(|&xi| {
            let q = mult_to_constant(c, xi)?;
            let derived = CertificateRecord::new(check_constant_expansion(graph, q, xi, SearchMode::Exhaustive)?);
            let holds = !premise.certificate.holds || derived.certificate.holds;
            Ok(ConversionReport {
                lemma: ConversionId::MultToConstant,
                class: None,
                parameter: xi,
                premise: premise.clone(),
                derived,
                holds,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random instance suite
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub instances: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub classes: Vec<usize>,
    pub radius: f64,
    /// Candidate seeds tried before giving up.
    pub max_attempts: u64,
    pub seed: u64,
    /// Grid size for `β` in the additive conversion.
    pub beta_steps: usize,
    pub xis: Vec<f64>,
    pub minimizer: MinimizerOptions,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 200,
            min_points: 4,
            max_points: 12,
            classes: vec![2, 3],
            radius: 1.0,
            max_attempts: 200_000,
            seed: 0,
            beta_steps: 4,
            xis: vec![0.05, 0.1, 0.2, 0.4],
            minimizer: MinimizerOptions { require_exact: true, ..MinimizerOptions::default() },
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidArgument(m));
        if self.classes.is_empty() || self.classes.iter().any(|&k| k < 2) {
            return bad(format!("classes {:?} must be a nonempty list of values >= 2", self.classes));
        }
        let kmax = *self.classes.iter().max().unwrap_or(&2);
        if self.min_points < 4 || self.min_points > self.max_points || self.max_points < 2 * kmax {
            return bad(format!(
                "need 4 <= min_points <= max_points and max_points >= 2·max(classes), got {} and {}",
                self.min_points, self.max_points
            ));
        }
        if self.max_points > crate::expansion::EXHAUSTIVE_CAP {
            return bad(format!("max_points {} exceeds {}", self.max_points, crate::expansion::EXHAUSTIVE_CAP));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius {} must be positive", self.radius));
        }
        if self.beta_steps == 0 || self.xis.iter().any(|&x| !(x > 0.0)) {
            return bad("beta_steps must be positive and every xi > 0".into());
        }
        Ok(())
    }
}

/// Random instance: each class is a chain of points in the plane with steps
/// shorter than the radius, chains placed at random spacing so that classes
/// sometimes touch. Masses are random, and each class gets a random mistake
/// set of class mass below 1/3, flipped to random other classes.
pub fn random_instance(cfg: &SuiteConfig, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.classes[rng.gen_range(0..cfg.classes.len())];
    let n = rng.gen_range(cfg.min_points.max(2 * k)..=cfg.max_points);
    let mut sizes = vec![2usize; k];
    for _ in 2 * k..n {
        sizes[rng.gen_range(0..k)] += 1;
    }
    let r = cfg.radius;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut light = vec![false; n];
    let mut x0 = 0.0;
    let mut touching = false;
    for (c, &size) in sizes.iter().enumerate() {
        if touching {
            light[points.len()] = true;
        }
        let mut p = vec![x0, rng.gen_range(-0.5..0.5) * r];
        let mut right: f64 = p[0];
        for _ in 0..size {
            points.push(p.clone());
            labels.push(c);
            right = right.max(p[0]);
            let step = rng.gen_range(0.3..0.95) * r;
            let angle: f64 = rng.gen_range(-1.2..1.2);
            p = vec![p[0] + step * angle.cos(), p[1] + step * angle.sin()];
        }
        // half the gaps are short enough for neighboring classes to touch; the
        // points at a short gap are light so the balance condition can still hold
        touching = rng.gen_bool(0.5);
        x0 = right + if touching { rng.gen_range(0.2..1.2) } else { rng.gen_range(1.2..3.0) } * r;
        if touching {
            light[points.len() - 1] = true;
        }
    }
    let weights: Vec<f64> =
        light.iter().map(|&l| if l { rng.gen_range(0.05..0.3) } else { rng.gen_range(0.5..1.5) }).collect();
    let pop = FinitePopulation::with_weights(points, &weights, labels, k)?;
    let mut pl = pop.labels().to_vec();
    for c in 0..k {
        let mut members = pop.class_members(c);
        members.shuffle(&mut rng);
        let total = pop.class_mass(c);
        let want = rng.gen_range(0..members.len());
        let mut mass = 0.0;
        for &i in members.iter().take(want) {
            if (mass + pop.masses()[i]) / total >= 1.0 / 3.0 - 1e-9 {
                break;
            }
            mass += pop.masses()[i];
            pl[i] = (c + rng.gen_range(1..k)) % k;
        }
    }
    Ok(Instance {
        population: pop,
        transform: TransformSpec::ball(r),
        rule: OverlapRule::Witnessed,
        pseudolabels: Some(Labeling::new(pl, k)?),
    })
}

/// Why an instance does not qualify for every check, or `None` if it does.
pub fn disqualification(instance: &Instance) -> Result<Option<String>> {
    let graph = instance.graph()?;
    let Some(pl) = instance.pseudolabeler()? else {
        return Ok(Some("no pseudolabels".into()));
    };
    if let Err((r, _)) = denoise_preconditions(&graph, &pl, None) {
        return Ok(Some(r));
    }
    if let Err((r, _)) = unsup_preconditions(&graph, None, measure_separation(&graph)) {
        return Ok(Some(r));
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    /// Seeds of the accepted instances, in order.
    pub seeds: Vec<u64>,
    pub attempts: u64,
    pub reports: Vec<TheoremCheckReport>,
    pub conversions: Vec<ConversionReport>,
}

impl SuiteOutcome {
    pub fn violations(&self) -> usize {
        self.reports.iter().filter(|r| r.status == Status::Violated).count()
            + self.conversions.iter().filter(|c| !c.holds).count()
    }
}

/// Every check and conversion on one qualifying instance. The additive check
/// uses `α = err_pl/2` and the smallest certified `q`.
pub fn check_instance(
    instance: &Instance,
    cfg: &SuiteConfig,
) -> Result<(Vec<TheoremCheckReport>, Vec<ConversionReport>)> {
    let graph = instance.graph()?;
    let pl =
        instance.pseudolabeler()?.ok_or_else(|| LabError::InvalidArgument("instance has no pseudolabels".into()))?;
    let mut reports = vec![
        check_lemma_pop_denoise(&graph, &pl, None)?,
        check_theorem_denoise(&graph, &pl, None, &cfg.minimizer)?,
        check_theorem_unsup(&graph, None, &cfg.minimizer)?,
        check_lemma_unsup(&graph, None)?,
    ];
    let alpha = 0.5 * err(graph.population(), pl.labeling())?;
    let q = min_additive_q(&graph, pl.mistakes(), alpha)?;
    reports.push(check_theorem_additive_all(&graph, &pl, q, alpha)?);
    let mut conversions = Vec::new();
    let c_bar = reports[0].inputs.c_bar;
    if pl.a_bar() > 0.0 {
        conversions.extend(check_mult_to_additive(&graph, &pl, c_bar, cfg.beta_steps)?);
    }
    conversions.extend(check_mult_to_constant(&graph, reports[2].inputs.c, &cfg.xis)?);
    Ok((reports, conversions))
}

/// Draws instances from consecutive seeds, keeps the first `instances` that
/// qualify, and checks them all. Output order follows the seeds.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    let mut attempts = 0u64;
    let batch = 256u64;
    while seeds.len() < cfg.instances {
        if attempts >= cfg.max_attempts {
            return Err(LabError::BudgetExceeded(format!(
                "{} qualifying instances after {attempts} attempts",
                seeds.len()
            )));
        }
        let hi = (attempts + batch).min(cfg.max_attempts);
        let verdicts: Vec<(u64, bool)> = (attempts..hi)
            .into_par_iter()
            .map(|s| {
                let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(s);
                let ok = random_instance(cfg, seed).and_then(|i| disqualification(&i)).map(|d| d.is_none());
                ok.map(|ok| (seed, ok))
            })
            .collect::<Result<_>>()?;
        for (seed, ok) in verdicts {
            attempts += 1;
            if ok {
                seeds.push(seed);
                if seeds.len() == cfg.instances {
                    break;
                }
            }
        }
    }
    let results: Vec<(Vec<TheoremCheckReport>, Vec<ConversionReport>)> =
        seeds.par_iter().map(|&s| check_instance(&random_instance(cfg, s)?, cfg)).collect::<Result<_>>()?;
    let mut reports = Vec::new();
    let mut conversions = Vec::new();
    for (r, c) in results {
        reports.extend(r);
        conversions.extend(c);
    }
    Ok(SuiteOutcome { seeds, attempts, reports, conversions })
}

// ---------------------------------------------------------------------------
// Finite-sample terms
// ---------------------------------------------------------------------------

pub const CONSTANTS_NOTE: &str = "up to unspecified universal constants (all set to 1)";

/// `max{1, log n · log d}`, the instantiated polylog factor.
pub fn log_factor(n: usize, d: usize) -> f64 {
    ((n as f64).ln() * (d as f64).ln()).max(1.0)
}

/// `Σ_i √d·‖W_i‖_F`, with `d` the largest hidden or output width.
pub fn weight_complexity(net: &FeedforwardNet) -> f64 {
    let d = net.q_max() as f64;
    net.weights().iter().map(|w| d.sqrt() * w.frobenius()).sum()
}

/// `√((log(1/δ) + p log n)/n)`.
pub fn zeta(n: usize, delta: f64, depth: usize) -> f64 {
    (((1.0 / delta).ln() + depth as f64 * (n as f64).ln()) / n as f64).sqrt()
}

/// `(1/(c−1))·√((log(K/δ) + p log n)/n)`, the form used by the end-to-end bounds.
pub fn zeta_end_to_end(n: usize, delta: f64, depth: usize, classes: usize, c: f64) -> f64 {
    (((classes as f64 / delta).ln() + depth as f64 * (n as f64).ln()) / n as f64).sqrt() / (c - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationTerms {
    /// Fraction of the sample with robust margin `≤ t`.
    pub empirical: f64,
    /// `log_factor·Σ_i √d‖W_i‖_F / (t√n)`
    pub complexity: f64,
    pub zeta: f64,
    pub total: f64,
    #[serde(with = "extended")]
    pub t: f64,
    pub n: usize,
    pub delta: f64,
    pub width: usize,
    pub depth: usize,
    pub frobenius: Vec<f64>,
    pub log_factor: f64,
    pub note: String,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(LabError::InvalidArgument(format!("confidence δ = {delta} outside (0, 1)")));
    }
    Ok(())
}

fn check_margins(margins: &[f64]) -> Result<()> {
    if margins.is_empty() {
        return Err(LabError::InvalidArgument("empty margin sample".into()));
    }
    if margins.iter().any(|m| !(*m >= 0.0)) {
        return Err(LabError::InvalidArgument("margins must be >= 0".into()));
    }
    Ok(())
}

fn rate_at_most(values: &[f64], t: f64) -> f64 {
    values.iter().filter(|&&m| m <= t).count() as f64 / values.len() as f64
}

/// Terms of the robust-consistency generalization bound at threshold `t`,
/// given the robust margins `m_B(F, x)` of a sample. Constants are 1.
pub fn generalization_rhs(net: &FeedforwardNet, margins: &[f64], t: f64, delta: f64) -> Result<GeneralizationTerms> {
    if !(t > 0.0) {
        return Err(LabError::InvalidArgument(format!("threshold t = {t} must be positive")));
    }
    check_delta(delta)?;
    check_margins(margins)?;
    let n = margins.len();
    let lf = log_factor(n, net.q_max());
    let empirical = rate_at_most(margins, t);
    let complexity = lf * weight_complexity(net) / (t * (n as f64).sqrt());
    let z = zeta(n, delta, net.depth());
    Ok(GeneralizationTerms {
        empirical,
        complexity,
        zeta: z,
        total: empirical + complexity + z,
        t,
        n,
        delta,
        width: net.q_max(),
        depth: net.depth(),
        frobenius: net.weights().iter().map(|w| w.frobenius()).collect(),
        log_factor: lf,
        note: CONSTANTS_NOTE.into(),
    })
}

/// Per-point margins of a sample under a trained net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSample {
    /// `m_B(F, x)`
    pub robust: Vec<f64>,
    /// `m(F, x, ŷ(x))` at the predicted class (the margin is 0 at any other).
    pub clean: Vec<f64>,
    pub predicted: Vec<usize>,
    /// `m(F, x, G_pl(x))`, needed for the pseudolabel bound.
    pub pseudolabel: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndToEndMode {
    Unsup { t: f64, u: Vec<f64> },
    Pl { t1: f64, t2: f64, err_pl: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnsupEndToEnd {
    pub robust_rate: f64,
    /// `E[1(m(F, x, y) ≥ u_y)]` per class
    pub class_rates: Vec<f64>,
    /// Per-class balance condition: left side, right side
    pub condition_lhs: Vec<f64>,
    pub condition_rhs: Vec<f64>,
    pub condition_met: bool,
    pub complexity: f64,
    pub zeta: f64,
    pub value: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlEndToEnd {
    pub robust_rate: f64,
    pub pseudolabel_rate: f64,
    pub complexity: f64,
    pub zeta: f64,
    pub b1: f64,
    pub b2: f64,
    pub err_pl: f64,
    pub value: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EndToEnd {
    Unsup(UnsupEndToEnd),
    Pl(PlEndToEnd),
}

impl EndToEnd {
    pub fn value(&self) -> f64 {
        match self {
            EndToEnd::Unsup(u) => u.value,
            EndToEnd::Pl(p) => p.value,
        }
    }
}

/// Finite-sample error bound assembled from empirical margin rates and the
/// complexity terms (unit constants).
pub fn end_to_end_rhs(
    net: &FeedforwardNet,
    sample: &MarginSample,
    mode: &EndToEndMode,
    delta: f64,
    c: f64,
) -> Result<EndToEnd> {
    check_c(c)?;
    check_delta(delta)?;
    check_margins(&sample.robust)?;
    let n = sample.robust.len();
    if sample.clean.len() != n || sample.predicted.len() != n {
        return Err(LabError::DimensionMismatch { expected: n, got: sample.clean.len().min(sample.predicted.len()) });
    }
    let k = net.num_classes();
    let scale = log_factor(n, net.q_max()) * weight_complexity(net) / (n as f64).sqrt();
    let z = zeta_end_to_end(n, delta, net.depth(), k, c);
    match mode {
        EndToEndMode::Unsup { t, u } => {
            if !(*t > 0.0) || u.len() != k || u.iter().any(|v| !(*v > 0.0)) {
                return Err(LabError::InvalidArgument(format!("need t > 0 and {k} positive thresholds u_y")));
            }
            let robust_rate = rate_at_most(&sample.robust, *t);
            let class_rates: Vec<f64> = (0..k)
                .map(|y| {
                    let hits = (0..n).filter(|&i| sample.predicted[i] == y && sample.clean[i] >= u[y]).count();
                    hits as f64 / n as f64
                })
                .collect();
            let factor = balance_factor(c);
            let condition_lhs: Vec<f64> = class_rates.iter().map(|r| r - factor * robust_rate).collect();
            let condition_rhs: Vec<f64> = u.iter().map(|uy| scale / (c - 1.0) * (1.0 / uy + 1.0 / t) + z).collect();
            let condition_met = condition_lhs.iter().zip(&condition_rhs).all(|(l, r)| l >= r);
            let complexity = scale / t;
            let value = (1.0 + 1.0 / (c - 1.0)).max(2.0) * robust_rate + complexity + z;
            Ok(EndToEnd::Unsup(UnsupEndToEnd {
                robust_rate,
                class_rates,
                condition_lhs,
                condition_rhs,
                condition_met,
                complexity,
                zeta: z,
                value,
                note: CONSTANTS_NOTE.into(),
            }))
        }
        EndToEndMode::Pl { t1, t2, err_pl } => {
            if !(*t1 > 0.0 && *t2 > 0.0) {
                return Err(LabError::InvalidArgument("thresholds t1, t2 must be positive".into()));
            }
            let pm = sample
                .pseudolabel
                .as_ref()
                .ok_or_else(|| LabError::InvalidArgument("pseudolabel margins are required".into()))?;
            check_margins(pm)?;
            if pm.len() != n {
                return Err(LabError::DimensionMismatch { expected: n, got: pm.len() });
            }
            let robust_rate = rate_at_most(&sample.robust, *t1);
            let pseudolabel_rate = rate_at_most(pm, *t2);
            let complexity = scale * (1.0 / t1 + 1.0 / t2);
            let b1 = 2.0 * robust_rate + pseudolabel_rate + complexity + z;
            let b2 = 4.0 * robust_rate + 3.0 * pseudolabel_rate + complexity + z;
            let value = (b1 - err_pl).max(b2 - (3.0 - 4.0 / (c - 1.0)) * err_pl);
            Ok(EndToEnd::Pl(PlEndToEnd {
                robust_rate,
                pseudolabel_rate,
                complexity,
                zeta: z,
                b1,
                b2,
                err_pl: *err_pl,
                value,
                note: CONSTANTS_NOTE.into(),
            }))
        }
    }
}
