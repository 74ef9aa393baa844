//! Expansion certificates and exact theorem checks against a naive oracle that
//! recomputes balls, overlaps and subset masses straight from the points.

use proptest::prelude::*;
use stlab::bounds::{check_lemma_pop_denoise, check_lemma_unsup, reverify, Status};
use stlab::dataspace::{build_neighborhood_graph_with, FinitePopulation, OverlapRule, TransformSpec};
use stlab::expansion::{
    check_additive_expansion, check_constant_expansion, check_mult_expansion, max_mult_factor, SearchMode,
};
use stlab::objectives::{Labeling, Pseudolabeler};

const TOL: f64 = 1e-12;

struct Oracle {
    labels: Vec<usize>,
    mass: Vec<f64>,
    k: usize,
    /// overlap[i][j]: some point lies in both closed balls
    overlap: Vec<Vec<bool>>,
}

impl Oracle {
    fn new(points: &[(f64, f64)], weights: &[f64], labels: &[usize], k: usize, r: f64) -> Self {
        let n = points.len();
        let total: f64 = weights.iter().sum();
        let inside = |i: usize, z: usize| {
            let (dx, dy) = (points[i].0 - points[z].0, points[i].1 - points[z].1);
            (dx * dx + dy * dy).sqrt() <= r + 1e-9
        };
        let overlap = (0..n).map(|i| (0..n).map(|j| (0..n).any(|z| inside(i, z) && inside(j, z))).collect()).collect();
        Oracle { labels: labels.to_vec(), mass: weights.iter().map(|w| w / total).collect(), k, overlap }
    }

    fn n(&self) -> usize {
        self.labels.len()
    }

    fn mass(&self, set: u32) -> f64 {
        (0..self.n()).filter(|&i| set >> i & 1 == 1).map(|i| self.mass[i]).sum()
    }

    fn class_set(&self, c: usize) -> u32 {
        (0..self.n()).filter(|&i| self.labels[i] == c).fold(0, |s, i| s | 1 << i)
    }

    /// Same-class overlap neighbors of the members of `v`.
    fn restricted(&self, v: u32) -> u32 {
        let mut out = 0;
        for i in (0..self.n()).filter(|&i| v >> i & 1 == 1) {
            for j in 0..self.n() {
                if self.overlap[i][j] && self.labels[j] == self.labels[i] {
                    out |= 1 << j;
                }
            }
        }
        out
    }

    fn subsets(set: u32) -> impl Iterator<Item = u32> {
        let mut sub = set;
        let mut done = false;
        std::iter::from_fn(move || {
            if done {
                return None;
            }
            let cur = sub;
            if sub == 0 {
                done = true;
            } else {
                sub = (sub - 1) & set;
            }
            Some(cur)
        })
        .filter(|&s| s != 0)
    }

    fn mult_holds(&self, a: f64, c: f64) -> bool {
        (0..self.k).all(|cls| {
            let ci = self.class_set(cls);
            let pi = self.mass(ci);
            Self::subsets(ci).all(|v| {
                let pv = self.mass(v) / pi;
                pv > a + TOL || self.mass(self.restricted(v) & ci) / pi >= (c * pv).min(1.0) - TOL
            })
        })
    }

    fn max_factor(&self, a: f64) -> f64 {
        let mut best = f64::INFINITY;
        for cls in 0..self.k {
            let ci = self.class_set(cls);
            let pi = self.mass(ci);
            for v in Self::subsets(ci) {
                let pv = self.mass(v) / pi;
                let pn = self.mass(self.restricted(v) & ci) / pi;
                if pv <= a + TOL && pn < 1.0 - TOL {
                    best = best.min(pn / pv);
                }
            }
        }
        best
    }

    fn additive_holds(&self, s: u32, q: f64, alpha: f64) -> bool {
        Self::subsets(s).all(|v| {
            let pv = self.mass(v);
            pv <= q + TOL || self.mass(self.restricted(v) & !s) > pv + alpha
        })
    }

    fn constant_holds(&self, q: f64, xi: f64) -> bool {
        let all = (1u32 << self.n()) - 1;
        Self::subsets(all).all(|s| {
            let ps = self.mass(s);
            let half =
                (0..self.k).all(|c| self.mass(s & self.class_set(c)) <= self.mass(self.class_set(c)) / 2.0 + TOL);
            ps < q - TOL || !half || self.mass(self.restricted(s) & !s) >= xi.min(ps) - TOL
        })
    }
}

type Case = (Vec<(f64, f64)>, Vec<f64>, Vec<usize>);

fn instance(max: usize) -> impl Strategy<Value = Case> {
    (4..=max).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..12, 0u8..4), n),
            prop::collection::vec(0.5f64..2.0, n),
            prop::collection::vec(0usize..2, n),
        )
            .prop_map(|(grid, w, mut labels)| {
                labels[0] = 0;
                labels[1] = 1;
                (grid.iter().map(|&(x, y)| (x as f64 * 0.4, y as f64 * 0.4)).collect(), w, labels)
            })
    })
}

fn build(case: &Case, r: f64) -> (stlab::dataspace::NeighborhoodGraph, Oracle) {
    let (pts, w, labels) = case;
    let pop =
        FinitePopulation::with_weights(pts.iter().map(|&(x, y)| vec![x, y]).collect(), w, labels.clone(), 2).unwrap();
    let g = build_neighborhood_graph_with(&pop, &TransformSpec::ball(r), OverlapRule::Witnessed).unwrap();
    (g, Oracle::new(pts, w, labels, 2, r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multiplicative_matches_oracle(case in instance(12), a in 0.05f64..1.0, c in 1.0f64..6.0) {
        let (g, o) = build(&case, 0.5);
        let cert = check_mult_expansion(&g, a, c, SearchMode::Exhaustive).unwrap();
        prop_assert_eq!(cert.holds, o.mult_holds(a, c));
        let (best, _) = max_mult_factor(&g, a).unwrap();
        let want = o.max_factor(a);
        prop_assert!(best == want || (best - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn additive_matches_oracle(case in instance(12), pick in any::<u32>(), q in 0.0f64..0.3, alpha in 0.0f64..0.2) {
        let (g, o) = build(&case, 0.5);
        let n = case.0.len();
        let s: Vec<usize> = (0..n).filter(|&i| pick >> i & 1 == 1).collect();
        let mask = s.iter().fold(0u32, |m, &i| m | 1 << i);
        let cert = check_additive_expansion(&g, &s, q, alpha, SearchMode::Exhaustive).unwrap();
        prop_assert_eq!(cert.holds, o.additive_holds(mask, q, alpha));
    }

    #[test]
    fn constant_matches_oracle(case in instance(10), q in 0.0f64..0.5, xi in 0.0f64..0.5) {
        let (g, o) = build(&case, 0.5);
        let cert = check_constant_expansion(&g, q, xi, SearchMode::Exhaustive).unwrap();
        prop_assert_eq!(cert.holds, o.constant_holds(q, xi));
    }

    #[test]
    fn lemmas_hold_and_reverify(case in instance(9), flips in prop::collection::vec(any::<bool>(), 9)) {
        let (g, _) = build(&case, 0.5);
        let pop = g.population();
        // flip at most a quarter of each class
        let mut pl = pop.labels().to_vec();
        for c in 0..2 {
            let members = pop.class_members(c);
            let mut budget = pop.class_mass(c) / 4.0;
            for &i in &members {
                if flips[i] && pop.masses()[i] < budget {
                    budget -= pop.masses()[i];
                    pl[i] = 1 - c;
                }
            }
        }
        let pl = Pseudolabeler::new(pop, Labeling::new(pl, 2).unwrap()).unwrap();
        for r in [check_lemma_pop_denoise(&g, &pl, None).unwrap(), check_lemma_unsup(&g, None).unwrap()] {
            prop_assert!(r.status != Status::Violated, "{:?}", r);
            prop_assert!(reverify(&r).unwrap().consistent);
        }
    }
}
