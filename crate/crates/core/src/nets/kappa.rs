//! Data-dependent lower bound on the all-layer margin.
//!
//! Layers are counted with activations as their own layers: layer `2k−1` is
//! `W_k` and layer `2k` is `φ`, so there are `2p−1` layers. `ν_{j←i}` is the
//! operator norm of the Jacobian of layer `j`'s output with respect to layer
//! `i−1`'s output at the clean input, with `ν_{i−1←i} = 1`.

use super::{gamma_and_runner_up, trace_unchecked, FeedforwardNet};
use crate::error::{LabError, Result};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};

/// The three sums that make up `ψ_(i)`, with every summand kept for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiTerms {
    /// `s_(i−1)·ν_{2j←2i}/s_(j)` for `j = i..p−1`
    pub layer_ratio: Vec<f64>,
    /// `ν_{j′←2i}·ν_{2i−2←j}/ν_{j′←j}` for `1 ≤ j ≤ 2i−1 ≤ j′ ≤ 2p−1`
    pub jacobian_ratio: Vec<f64>,
    /// `κ̄·ν_{j′←j″+1}·ν_{j″−1←2i}·ν_{j″−1←j}·s_(i−1)/ν_{j′←j}`, `j″` even
    pub curvature: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaBound {
    pub bound: f64,
    pub gamma: f64,
    pub kappa: Vec<f64>,
    /// `√2·s_(i−1)·ν_{2p−1←2i}/γ`
    pub first_terms: Vec<f64>,
    pub psi: Vec<PsiTerms>,
    /// `s_(0) = ‖x‖`, `s_(i) = ‖h_i‖` for `i = 1..p−1`
    pub layer_norms: Vec<f64>,
    /// `nu[j][i] = ν_{j←i}` for `1 ≤ i ≤ j+1`, `0 ≤ j ≤ 2p−1`; NaN elsewhere
    pub nu: Vec<Vec<f64>>,
    pub kappa_bar: f64,
}

/// `ν` table indexed `[j][i]`.
fn nu_table(net: &FeedforwardNet, x: &[f64]) -> Vec<Vec<f64>> {
    let tr = trace_unchecked(net, x, None);
    let p = net.depth();
    let last = 2 * p - 1;
    let width = |layer: usize| net.dims()[layer.div_ceil(2)];
    let mut nu = vec![vec![f64::NAN; last + 2]; last + 1];
    for (j, row) in nu.iter_mut().enumerate() {
        row[j + 1] = 1.0;
    }
    for i in 1..=last {
        let mut prod = Mat::identity(width(i - 1));
        for j in i..=last {
            prod = if j % 2 == 1 {
                net.weights()[j / 2].matmul(&prod)
            } else {
                let h = &tr.pre[j / 2 - 1];
                let d: Vec<f64> = h.iter().map(|&t| net.activation().derivative(t)).collect();
                prod.scale_rows(&d)
            };
            nu[j][i] = prod.op_norm();
        }
    }
    nu
}

/// Lower bound `1/‖κ‖₂` on `m(F, x, y)` with all intermediate terms.
///
/// The first term carries a factor √2. Without it the bound exceeds the
/// exact one-layer margin `γ/(√2‖x‖)` whenever `γ < (√2−1)‖W‖‖x‖`.
pub fn margin_lower_bound(net: &FeedforwardNet, x: &[f64], y: usize) -> Result<KappaBound> {
    net.check_input(x)?;
    if y >= net.num_classes() || net.num_classes() < 2 {
        return Err(LabError::InvalidArgument(format!("label {y} invalid for {} classes", net.num_classes())));
    }
    let tr = trace_unchecked(net, x, Some(&super::PerturbationVector::zeros(net)));
    let gamma = gamma_and_runner_up(tr.logits(), y).0;
    if !(gamma > 0.0) {
        return Err(LabError::Precondition(format!("γ(F(x), y) = {gamma} must be positive")));
    }
    let p = net.depth();
    let last = 2 * p - 1;
    let s = tr.norms.clone();
    let nu = nu_table(net, x);
    let kb = net.activation().derivative_lipschitz();
    let mut kappa = Vec::with_capacity(p);
    let mut first_terms = Vec::with_capacity(p);
    let mut psi = Vec::with_capacity(p);
    for i in 1..=p {
        let s_prev = s[i - 1];
        let first = 2f64.sqrt() * s_prev * nu[last][2 * i] / gamma;
        let layer_ratio: Vec<f64> = (i..p).map(|j| s_prev * nu[2 * j][2 * i] / s[j]).collect();
        let mut jacobian_ratio = Vec::new();
        for j in 1..=2 * i - 1 {
            for jp in 2 * i - 1..=last {
                jacobian_ratio.push(nu[jp][2 * i] * nu[2 * i - 2][j] / nu[jp][j]);
            }
        }
        let mut curvature = Vec::new();
        for j in 1..=last {
            for jp in j..=last {
                let start = (2 * i).max(j);
                for jpp in (start..=jp).filter(|v| v % 2 == 0) {
                    curvature.push(kb * nu[jp][jpp + 1] * nu[jpp - 1][2 * i] * nu[jpp - 1][j] * s_prev / nu[jp][j]);
                }
            }
        }
        let total = layer_ratio.iter().chain(&jacobian_ratio).chain(&curvature).sum::<f64>();
        kappa.push(first + total);
        first_terms.push(first);
        psi.push(PsiTerms { layer_ratio, jacobian_ratio, curvature, total });
    }
    let norm = kappa.iter().map(|k| k * k).sum::<f64>().sqrt();
    Ok(KappaBound { bound: 1.0 / norm, gamma, kappa, first_terms, psi, layer_norms: s, nu, kappa_bar: kb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use crate::nets::{all_layer_margin, forward, Activation, MarginOptions};

    #[test]
    fn one_layer_bound_has_degenerate_psi() {
        let net = FeedforwardNet::random(&[3, 3], Activation::Softplus, 1.0, 4).unwrap();
        let x = [0.4, -0.1, 0.8];
        let y = crate::linalg::argmax(&forward(&net, &x).unwrap());
        let kb = margin_lower_bound(&net, &x, y).unwrap();
        let w = net.weights()[0].op_norm();
        assert!(kb.psi[0].layer_ratio.is_empty() && kb.psi[0].curvature.is_empty());
        assert_eq!(kb.psi[0].jacobian_ratio.len(), 1);
        assert!((kb.psi[0].total - 1.0 / w).abs() < 1e-12);
        let expect = 1.0 / (2f64.sqrt() * norm(&x) / kb.gamma + 1.0 / w);
        assert!((kb.bound - expect).abs() < 1e-12 * expect);
        let exact = kb.gamma / (2f64.sqrt() * norm(&x));
        assert!(kb.bound <= exact);
    }

    #[test]
    fn one_layer_bound_grows_with_last_layer_scale() {
        let net = FeedforwardNet::random(&[2, 3], Activation::Tanh, 1.0, 9).unwrap();
        let x = [1.0, -0.5];
        let y = crate::linalg::argmax(&forward(&net, &x).unwrap());
        let a = margin_lower_bound(&net, &x, y).unwrap().bound;
        let mut w = net.weights()[0].clone();
        w.data.iter_mut().for_each(|v| *v *= 2.0);
        let b = margin_lower_bound(&net.with_weights(vec![w]).unwrap(), &x, y).unwrap().bound;
        assert!(b >= a);
    }

    #[test]
    fn nonpositive_gamma_is_rejected() {
        let net = FeedforwardNet::new(vec![Mat::zeros(2, 2)], Activation::Softplus).unwrap();
        assert!(matches!(margin_lower_bound(&net, &[1.0, 1.0], 0), Err(LabError::Precondition(_))));
    }

    #[test]
    fn nu_table_identities() {
        let net = FeedforwardNet::random(&[2, 4, 3, 2], Activation::Softplus, 1.0, 1).unwrap();
        let nu = nu_table(&net, &[0.3, 0.2]);
        for i in 1..=5 {
            assert_eq!(nu[i - 1][i], 1.0);
        }
        assert!((nu[1][1] - net.weights()[0].op_norm()).abs() < 1e-12);
        // submultiplicativity
        for i in 1..=5 {
            for k in i..=5 {
                for j in k..=5 {
                    if k < j {
                        assert!(nu[j][i] <= nu[j][k + 1] * nu[k][i] * (1.0 + 1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn bound_below_optimized_margin_on_small_nets() {
        for seed in 0..6 {
            let net = FeedforwardNet::random(&[2, 5, 3], Activation::Softplus, 1.0, seed).unwrap();
            let x = [0.6, -0.9];
            let y = crate::linalg::argmax(&forward(&net, &x).unwrap());
            let kb = margin_lower_bound(&net, &x, y).unwrap();
            let m = all_layer_margin(&net, &x, y, &MarginOptions::default()).unwrap();
            assert!(m.converged);
            assert!(kb.bound <= m.value + 1e-6, "seed {seed}: {} > {}", kb.bound, m.value);
        }
    }
}
