//! Finite metric-probability populations, synthetic generators and the
//! transformation-set structure `B(x)` / neighborhood structure `N(x)`.
//!
//! A [`FinitePopulation`] is the whole space for every exact computation in
//! this crate: subsets are index sets and probabilities are sums of masses.

use crate::error::{LabError, Result};
use crate::linalg::{dist, Mat};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Absolute tolerance for every distance comparison.
pub const DIST_TOL: f64 = 1e-9;

/// Tolerance on the total mass of a population.
pub const MASS_TOL: f64 = 1e-12;

/// Weighted labeled point cloud. Labels are 0-based class indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPopulation", into = "RawPopulation")]
pub struct FinitePopulation {
    dim: usize,
    num_classes: usize,
    points: Vec<Vec<f64>>,
    masses: Vec<f64>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    dim: usize,
    num_classes: usize,
    points: Vec<Vec<f64>>,
    masses: Vec<f64>,
    labels: Vec<usize>,
}

impl TryFrom<RawPopulation> for FinitePopulation {
    type Error = LabError;
    fn try_from(r: RawPopulation) -> Result<Self> {
        let pop = FinitePopulation::new(r.points, r.masses, r.labels, r.num_classes)?;
        if pop.dim != r.dim {
            return Err(LabError::DimensionMismatch { expected: r.dim, got: pop.dim });
        }
        Ok(pop)
    }
}

impl From<FinitePopulation> for RawPopulation {
    fn from(p: FinitePopulation) -> Self {
        RawPopulation { dim: p.dim, num_classes: p.num_classes, points: p.points, masses: p.masses, labels: p.labels }
    }
}

impl FinitePopulation {
    pub fn new(points: Vec<Vec<f64>>, masses: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let bad = |m: &str| Err(LabError::InvalidPopulation(m.to_string()));
        if points.is_empty() {
            return bad("no points");
        }
        if masses.len() != points.len() || labels.len() != points.len() {
            return bad("points, masses and labels differ in length");
        }
        let dim = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(LabError::DimensionMismatch { expected: dim, got: p.len() });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite coordinate");
        }
        if masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return bad("masses must be strictly positive");
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(LabError::InvalidPopulation(format!("masses sum to {total}, not 1")));
        }
        if num_classes == 0 {
            return bad("need at least one class");
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(LabError::InvalidPopulation(format!("label {l} outside 0..{num_classes}")));
        }
        for c in 0..num_classes {
            if !labels.contains(&c) {
                return Err(LabError::InvalidPopulation(format!("class {c} is empty")));
            }
        }
        Ok(FinitePopulation { dim, num_classes, points, masses, labels })
    }

    /// Builds a population with masses proportional to `weights`.
    pub fn with_weights(
        points: Vec<Vec<f64>>,
        weights: &[f64],
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(LabError::InvalidPopulation("weights must have positive sum".into()));
        }
        let masses = weights.iter().map(|w| w / total).collect();
        Self::new(points, masses, labels, num_classes)
    }

    pub fn uniform(points: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n], labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_members(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_mass(&self, class: usize) -> f64 {
        self.labels.iter().zip(&self.masses).filter(|(&l, _)| l == class).map(|(_, m)| m).fold(0.0, |s, m| s + m)
    }

    pub fn class_masses(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for (&l, &m) in self.labels.iter().zip(&self.masses) {
            out[l] += m;
        }
        out
    }

    /// Mass of the smallest ground-truth class.
    pub fn min_class_mass(&self) -> f64 {
        self.class_masses().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn mass_of(&self, set: &[usize]) -> f64 {
        set.iter().map(|&i| self.masses[i]).fold(0.0, |s, m| s + m)
    }

    /// Same points and masses with new ground-truth labels.
    pub fn relabeled(&self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(self.points.clone(), self.masses.clone(), labels, num_classes)
    }

    /// Every point translated by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(LabError::DimensionMismatch { expected: self.dim, got: shift.len() });
        }
        let points = self.points.iter().map(|p| p.iter().zip(shift).map(|(a, b)| a + b).collect()).collect();
        Self::new(points, self.masses.clone(), self.labels.clone(), self.num_classes)
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(LabError::IndexOutOfRange { index: i, len: self.len() })
        }
    }
}

// ---------------------------------------------------------------------------
// Transformations
// ---------------------------------------------------------------------------

/// A deterministic map `R^d → R^d` applied before the radius-`r` ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Augmentation {
    Identity,
    /// Negates one coordinate.
    Reflect {
        axis: usize,
    },
    Translate {
        offset: Vec<f64>,
    },
    Linear {
        matrix: Vec<Vec<f64>>,
    },
}

impl Augmentation {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Augmentation::Identity => x.to_vec(),
            Augmentation::Reflect { axis } => {
                let mut y = x.to_vec();
                y[*axis] = -y[*axis];
                y
            }
            Augmentation::Translate { offset } => x.iter().zip(offset).map(|(a, b)| a + b).collect(),
            Augmentation::Linear { matrix } => matrix.iter().map(|row| crate::linalg::dot(row, x)).collect(),
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let ok = match self {
            Augmentation::Identity => true,
            Augmentation::Reflect { axis } => *axis < d,
            Augmentation::Translate { offset } => offset.len() == d,
            Augmentation::Linear { matrix } => matrix.len() == d && matrix.iter().all(|r| r.len() == d),
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::InvalidArgument(format!("augmentation {self:?} does not act on R^{d}")))
        }
    }
}

/// Radius and augmentation set defining `B(x) = {x' : ∃T, ‖x' − T(x)‖ ≤ r}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub radius: f64,
    #[serde(default = "identity_only")]
    pub augmentations: Vec<Augmentation>,
}

fn identity_only() -> Vec<Augmentation> {
    vec![Augmentation::Identity]
}

impl TransformSpec {
    pub fn ball(radius: f64) -> Self {
        TransformSpec { radius, augmentations: identity_only() }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return Err(LabError::InvalidArgument(format!("radius {} must be finite and >= 0", self.radius)));
        }
        if self.augmentations.is_empty() {
            return Err(LabError::InvalidArgument("augmentation set is empty".into()));
        }
        self.augmentations.iter().try_for_each(|a| a.check_dim(dim))
    }

    pub fn is_identity_only(&self) -> bool {
        self.augmentations.iter().all(|a| *a == Augmentation::Identity)
    }
}

/// How the overlap `B(x) ∩ B(x') ≠ ∅` is decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// Continuous balls: `min_{T,T'} ‖T(x) − T'(x')‖ ≤ 2r`.
    #[default]
    Metric,
    /// The population is the whole space: some population point lies in both
    /// `B(x)` and `B(x')`. This is the relation every exact theorem check uses.
    Witnessed,
}

/// Materialized `B` membership (`b`) and overlap (`n`) relations.
#[derive(Clone, Debug)]
pub struct NeighborhoodGraph {
    population: FinitePopulation,
    transform: TransformSpec,
    rule: OverlapRule,
    b_adj: Vec<Vec<usize>>,
    n_adj: Vec<Vec<usize>>,
}

impl NeighborhoodGraph {
    pub fn population(&self) -> &FinitePopulation {
        &self.population
    }

    pub fn transform(&self) -> &TransformSpec {
        &self.transform
    }

    pub fn rule(&self) -> OverlapRule {
        self.rule
    }

    pub fn len(&self) -> usize {
        self.population.len()
    }

    pub fn is_empty(&self) -> bool {
        self.population.is_empty()
    }

    /// Sorted indices `j` with `x_j ∈ B(x_i)`.
    pub fn b_neighbors(&self, i: usize) -> &[usize] {
        &self.b_adj[i]
    }

    /// Sorted indices `j` with `B(x_i) ∩ B(x_j) ≠ ∅`.
    pub fn n_neighbors(&self, i: usize) -> &[usize] {
        &self.n_adj[i]
    }

    pub fn is_b_edge(&self, i: usize, j: usize) -> bool {
        self.b_adj[i].binary_search(&j).is_ok()
    }

    pub fn is_n_edge(&self, i: usize, j: usize) -> bool {
        self.n_adj[i].binary_search(&j).is_ok()
    }

    pub fn b_edges(&self) -> Vec<(usize, usize)> {
        edges(&self.b_adj)
    }

    pub fn n_edges(&self) -> Vec<(usize, usize)> {
        edges(&self.n_adj)
    }
}

fn edges(adj: &[Vec<usize>]) -> Vec<(usize, usize)> {
    adj.iter().enumerate().flat_map(|(i, row)| row.iter().map(move |&j| (i, j))).collect()
}

/// Builds the graph with the metric overlap rule.
pub fn build_neighborhood_graph(pop: &FinitePopulation, t: &TransformSpec) -> Result<NeighborhoodGraph> {
    build_neighborhood_graph_with(pop, t, OverlapRule::Metric)
}

pub fn build_neighborhood_graph_with(
    pop: &FinitePopulation,
    t: &TransformSpec,
    rule: OverlapRule,
) -> Result<NeighborhoodGraph> {
    t.validate(pop.dim())?;
    let n = pop.len();
    let r = t.radius;
    let augmented: Vec<Vec<Vec<f64>>> =
        t.augmentations.iter().map(|a| pop.points().iter().map(|x| a.apply(x)).collect()).collect();

    let b_adj: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| augmented.iter().any(|aug| dist(pop.point(j), &aug[i]) <= r + DIST_TOL)).collect())
        .collect();

    let n_adj: Vec<Vec<usize>> = match rule {
        OverlapRule::Metric => (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| {
                        i == j
                            || augmented
                                .iter()
                                .any(|ai| augmented.iter().any(|aj| dist(&ai[i], &aj[j]) <= 2.0 * r + DIST_TOL))
                    })
                    .collect()
            })
            .collect(),
        OverlapRule::Witnessed => {
            // owners[z] = points whose ball contains z
            let mut owners = vec![Vec::new(); n];
            for (i, row) in b_adj.iter().enumerate() {
                for &z in row {
                    owners[z].push(i);
                }
            }
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut hit = vec![false; n];
                    hit[i] = true;
                    for &z in &b_adj[i] {
                        for &j in &owners[z] {
                            hit[j] = true;
                        }
                    }
                    (0..n).filter(|&j| hit[j]).collect()
                })
                .collect()
        }
    };

    Ok(NeighborhoodGraph { population: pop.clone(), transform: t.clone(), rule, b_adj, n_adj })
}

/// Mass of points whose ball contains a point of another ground-truth class.
pub fn measure_separation(graph: &NeighborhoodGraph) -> f64 {
    let pop = graph.population();
    (0..pop.len())
        .filter(|&i| graph.b_neighbors(i).iter().any(|&j| pop.labels()[j] != pop.labels()[i]))
        .map(|i| pop.masses()[i])
        .fold(0.0, |s, m| s + m)
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Latent draw `z ~ N(0, I/d)`.
fn latent(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect()
}

/// `n` points per class from `N(τ_i, I/d)`, each of mass `w_i / n`.
pub fn gen_gaussian_mixture(
    k: usize,
    d: usize,
    means: &[Vec<f64>],
    mass_weights: &[f64],
    n: usize,
    seed: u64,
) -> Result<FinitePopulation> {
    if k == 0 || d == 0 || n == 0 {
        return Err(LabError::InvalidArgument("need k, d, n >= 1".into()));
    }
    if means.len() != k {
        return Err(LabError::DimensionMismatch { expected: k, got: means.len() });
    }
    if let Some(m) = means.iter().find(|m| m.len() != d) {
        return Err(LabError::DimensionMismatch { expected: d, got: m.len() });
    }
    let weights = class_weights(mass_weights, k)?;
    let mut rng = rng_for(seed);
    let mut points = Vec::with_capacity(k * n);
    let mut masses = Vec::with_capacity(k * n);
    let mut labels = Vec::with_capacity(k * n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..n {
            let z = latent(&mut rng, d);
            points.push(mean.iter().zip(&z).map(|(m, v)| m + v).collect());
            masses.push(weights[class] / n as f64);
            labels.push(class);
        }
    }
    FinitePopulation::new(points, masses, labels, k)
}

fn class_weights(w: &[f64], k: usize) -> Result<Vec<f64>> {
    if w.len() != k {
        return Err(LabError::DimensionMismatch { expected: k, got: w.len() });
    }
    if w.iter().any(|&x| !(x > 0.0)) {
        return Err(LabError::InvalidArgument("class weights must be positive".into()));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LabError::InvalidArgument(format!("class weights sum to {total}")));
    }
    Ok(w.iter().map(|x| x / total).collect())
}

/// Bi-Lipschitz class generator `Q_i: R^d → R^{d'}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldGenerator {
    /// Zero-padding into `R^{d'}`.
    Identity,
    /// `z ↦ A z + b` with `A` of full column rank.
    Linear { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// `z ↦ R·pad(g(z)) + b` with `g(t) = scale·t + bend·tanh(t)` per
    /// coordinate and `R` orthogonal.
    Warped { scale: f64, bend: f64, rotation: Vec<Vec<f64>>, offset: Vec<f64> },
}

impl ManifoldGenerator {
    /// Warped generator with a seeded orthogonal rotation of `R^{d'}`.
    pub fn warped(ambient: usize, scale: f64, bend: f64, offset: Vec<f64>, seed: u64) -> Self {
        let mut rng = rng_for(seed);
        let g = DMatrix::from_fn(ambient, ambient, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let rotation = (0..ambient).map(|i| (0..ambient).map(|j| q[(i, j)]).collect()).collect();
        ManifoldGenerator::Warped { scale, bend, rotation, offset }
    }

    /// Closed-form bi-Lipschitz constant `max(L, 1/ℓ)`.
    pub fn bi_lipschitz(&self, latent: usize) -> Result<f64> {
        match self {
            ManifoldGenerator::Identity => Ok(1.0),
            ManifoldGenerator::Linear { matrix, .. } => {
                let a = Mat::from_rows(matrix).ok_or_else(|| LabError::InvalidArgument("ragged matrix".into()))?;
                if a.cols != latent {
                    return Err(LabError::DimensionMismatch { expected: latent, got: a.cols });
                }
                let m = DMatrix::from_row_slice(a.rows, a.cols, &a.data);
                let sv = m.singular_values();
                let (hi, lo) = (sv.max(), sv.min());
                if !(lo > 0.0) {
                    return Err(LabError::InvalidArgument("linear generator is not injective".into()));
                }
                Ok(hi.max(1.0 / lo))
            }
            ManifoldGenerator::Warped { scale, bend, rotation, .. } => {
                if !(*scale > 0.0) || !(*bend >= 0.0) {
                    return Err(LabError::InvalidArgument("warp needs scale > 0 and bend >= 0".into()));
                }
                let r = Mat::from_rows(rotation).ok_or_else(|| LabError::InvalidArgument("ragged rotation".into()))?;
                let rtr = Mat { rows: r.cols, cols: r.rows, data: transpose(&r) }.matmul(&r);
                if rtr.sub(&Mat::identity(r.cols)).frobenius() > 1e-9 {
                    return Err(LabError::InvalidArgument("rotation is not orthogonal".into()));
                }
                Ok((scale + bend).max(1.0 / scale))
            }
        }
    }

    fn apply(&self, z: &[f64], ambient: usize) -> Vec<f64> {
        match self {
            ManifoldGenerator::Identity => {
                let mut x = z.to_vec();
                x.resize(ambient, 0.0);
                x
            }
            ManifoldGenerator::Linear { matrix, offset } => {
                matrix.iter().zip(offset).map(|(row, b)| crate::linalg::dot(row, z) + b).collect()
            }
            ManifoldGenerator::Warped { scale, bend, rotation, offset } => {
                let mut g: Vec<f64> = z.iter().map(|t| scale * t + bend * t.tanh()).collect();
                g.resize(ambient, 0.0);
                rotation.iter().zip(offset).map(|(row, b)| crate::linalg::dot(row, &g) + b).collect()
            }
        }
    }

    fn check_shape(&self, latent: usize, ambient: usize) -> Result<()> {
        let ok = match self {
            ManifoldGenerator::Identity => true,
            ManifoldGenerator::Linear { matrix, offset } => {
                matrix.len() == ambient && offset.len() == ambient && matrix.iter().all(|r| r.len() == latent)
            }
            ManifoldGenerator::Warped { rotation, offset, .. } => {
                rotation.len() == ambient && offset.len() == ambient && rotation.iter().all(|r| r.len() == ambient)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::InvalidArgument(format!("generator does not map R^{latent} to R^{ambient}")))
        }
    }
}

fn transpose(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.rows * m.cols];
    for i in 0..m.rows {
        for j in 0..m.cols {
            out[j * m.rows + i] = m.get(i, j);
        }
    }
    out
}

/// `n` points per class `Q_i(z)`, `z ~ N(0, I/d)`, classes of equal mass.
/// Fails if any generator's bi-Lipschitz constant exceeds `kappa_bound`.
pub fn gen_manifold_mixture(
    k: usize,
    latent_dim: usize,
    ambient_dim: usize,
    generators: &[ManifoldGenerator],
    kappa_bound: f64,
    n: usize,
    seed: u64,
) -> Result<FinitePopulation> {
    if k == 0 || latent_dim == 0 || n == 0 {
        return Err(LabError::InvalidArgument("need k, d, n >= 1".into()));
    }
    if ambient_dim < latent_dim {
        return Err(LabError::InvalidArgument("ambient dimension below latent dimension".into()));
    }
    if generators.len() != k {
        return Err(LabError::DimensionMismatch { expected: k, got: generators.len() });
    }
    for g in generators {
        g.check_shape(latent_dim, ambient_dim)?;
        let kappa = g.bi_lipschitz(latent_dim)?;
        if kappa > kappa_bound {
            return Err(LabError::InvalidArgument(format!(
                "generator bi-Lipschitz constant {kappa} exceeds declared bound {kappa_bound}"
            )));
        }
    }
    let mut rng = rng_for(seed);
    let mut points = Vec::with_capacity(k * n);
    let mut labels = Vec::with_capacity(k * n);
    let mass = 1.0 / (k * n) as f64;
    for (class, g) in generators.iter().enumerate() {
        for _ in 0..n {
            let z = latent(&mut rng, latent_dim);
            points.push(g.apply(&z, ambient_dim));
            labels.push(class);
        }
    }
    FinitePopulation::new(points, vec![mass; k * n], labels, k)
}

/// Two interleaved half-circles, `n` evenly spaced points per class, each
/// coordinate perturbed by `N(0, noise²)`, then translated by `shift`.
pub fn gen_two_moons(n: usize, noise: f64, shift: &[f64], seed: u64) -> Result<FinitePopulation> {
    if n < 2 {
        return Err(LabError::InvalidArgument("two moons needs n >= 2".into()));
    }
    if shift.len() != 2 {
        return Err(LabError::DimensionMismatch { expected: 2, got: shift.len() });
    }
    if !(noise >= 0.0) {
        return Err(LabError::InvalidArgument("noise must be >= 0".into()));
    }
    let mut rng = rng_for(seed);
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for class in 0..2 {
        for k in 0..n {
            let theta = std::f64::consts::PI * k as f64 / (n - 1) as f64;
            let (mut x, mut y) =
                if class == 0 { (theta.cos(), theta.sin()) } else { (1.0 - theta.cos(), 0.5 - theta.sin()) };
            if noise > 0.0 {
                x += noise * rng.sample::<f64, _>(StandardNormal);
                y += noise * rng.sample::<f64, _>(StandardNormal);
            }
            points.push(vec![x + shift[0], y + shift[1]]);
            labels.push(class);
        }
    }
    FinitePopulation::uniform(points, labels, 2)
}
