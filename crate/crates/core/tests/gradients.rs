use proptest::prelude::*;
use stlab::linalg::Mat;
use stlab::nets::{
    all_layer_margin, forward, grad, perturbed_forward, softmax, Activation, Example, FeedforwardNet, LossSpec,
    MarginOptions, PerturbationVector, Target,
};

const H: f64 = 1e-5;

fn loss_value(net: &FeedforwardNet, loss: &LossSpec, batch: &[Example]) -> f64 {
    grad(net, loss, batch).unwrap().loss
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn check_all(net: &FeedforwardNet, loss: &LossSpec, batch: &[Example]) {
    let g = grad(net, loss, batch).unwrap();
    let mut worst: f64 = 0.0;
    for l in 0..net.depth() {
        for k in 0..net.weights()[l].data.len() {
            let mut plus = net.weights().to_vec();
            let mut minus = net.weights().to_vec();
            plus[l].data[k] += H;
            minus[l].data[k] -= H;
            let fp = loss_value(&net.with_weights(plus).unwrap(), loss, batch);
            let fm = loss_value(&net.with_weights(minus).unwrap(), loss, batch);
            worst = worst.max(rel_err((fp - fm) / (2.0 * H), g.weights[l].data[k]));
        }
    }
    for (b, ex) in batch.iter().enumerate() {
        for k in 0..ex.x.len() {
            let mut bp = batch.to_vec();
            let mut bm = batch.to_vec();
            bp[b].x[k] += H;
            bm[b].x[k] -= H;
            let fd = (loss_value(net, loss, &bp) - loss_value(net, loss, &bm)) / (2.0 * H);
            worst = worst.max(rel_err(fd, g.inputs[b][k]));
        }
        if let Some(d) = &ex.delta {
            for l in 0..d.layers.len() {
                for k in 0..d.layers[l].len() {
                    let mut bp = batch.to_vec();
                    let mut bm = batch.to_vec();
                    bp[b].delta.as_mut().unwrap().layers[l][k] += H;
                    bm[b].delta.as_mut().unwrap().layers[l][k] -= H;
                    let fd = (loss_value(net, loss, &bp) - loss_value(net, loss, &bm)) / (2.0 * H);
                    worst = worst.max(rel_err(fd, g.deltas[b].as_ref().unwrap().layers[l][k]));
                }
            }
        }
    }
    assert!(worst <= 1e-4, "{loss:?}: worst relative error {worst}");
}

fn small_delta(net: &FeedforwardNet, seed: u64) -> PerturbationVector {
    let mut d = PerturbationVector::zeros(net);
    let mut s = seed;
    for l in d.layers.iter_mut() {
        for v in l.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.3;
        }
    }
    d
}

fn batch(net: &FeedforwardNet, with_delta: bool, target: impl Fn(usize) -> Target) -> Vec<Example> {
    let xs = [vec![0.5, -0.3, 0.8], vec![-1.1, 0.4, 0.2], vec![0.3, 0.9, -0.7]];
    xs.iter()
        .enumerate()
        .map(|(i, x)| Example {
            x: x.clone(),
            target: target(i),
            delta: with_delta.then(|| small_delta(net, i as u64 + 7)),
        })
        .collect()
}

#[test]
fn gradients_match_central_differences() {
    for (dims, act) in [
        (vec![3, 4], Activation::Softplus),
        (vec![3, 6, 3], Activation::Softplus),
        (vec![3, 8, 5, 3], Activation::Tanh),
        (vec![3, 16, 16, 3], Activation::Softplus),
    ] {
        let net = FeedforwardNet::random(&dims, act, 1.2, 31).unwrap();
        let k = net.num_classes();
        for with_delta in [false, true] {
            check_all(&net, &LossSpec::CrossEntropy, &batch(&net, with_delta, |i| Target::Class(i % k)));
            let refs = |i: usize| {
                let z: Vec<f64> = (0..k).map(|j| ((i * 3 + j) as f64).sin()).collect();
                Target::Distribution(softmax(&z))
            };
            check_all(&net, &LossSpec::KlToReference, &batch(&net, with_delta, refs));
            check_all(&net, &LossSpec::MinEntropy, &batch(&net, with_delta, |_| Target::None));
        }
        // margin penalty: use labels whose hinge is active and away from ties
        let b: Vec<Example> = batch(&net, true, |_| Target::None)
            .into_iter()
            .map(|mut ex| {
                let z = perturbed_forward(&net, &ex.x, ex.delta.as_ref().unwrap()).unwrap();
                ex.target = Target::Class(stlab::linalg::argmax(&z));
                ex
            })
            .collect();
        check_all(&net, &LossSpec::MarginPenalty { penalty: 3.0, slack: 1e-3 }, &b);
    }
}

#[test]
fn margin_is_lipschitz_in_weights() {
    // needs ‖φ(h)‖ ≤ ‖h‖, which tanh satisfies
    for seed in 0..4 {
        let net = FeedforwardNet::random(&[2, 6, 3], Activation::Tanh, 1.5, seed).unwrap();
        let other = FeedforwardNet::random(&[2, 6, 3], Activation::Tanh, 0.02, seed + 100).unwrap();
        let shifted: Vec<Mat> = net
            .weights()
            .iter()
            .zip(other.weights())
            .map(|(a, b)| Mat { data: a.data.iter().zip(&b.data).map(|(u, v)| u + v).collect(), ..a.clone() })
            .collect();
        let net2 = net.with_weights(shifted).unwrap();
        let dist =
            net.weights().iter().zip(net2.weights()).map(|(a, b)| a.sub(b).op_norm().powi(2)).sum::<f64>().sqrt();
        let x = [0.7, -0.2];
        let y = stlab::linalg::argmax(&forward(&net, &x).unwrap());
        let opt = MarginOptions::default();
        let m1 = all_layer_margin(&net, &x, y, &opt).unwrap();
        let m2 = all_layer_margin(&net2, &x, y, &opt).unwrap();
        assert!(m1.converged && m2.converged);
        assert!((m1.value - m2.value).abs() <= dist + 2e-6, "seed {seed}: |{} − {}| > {dist}", m1.value, m2.value);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_perturbation_is_the_clean_pass(seed in 0u64..1000, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
        let net = FeedforwardNet::random(&[2, 5, 4, 3], Activation::Softplus, 1.0, seed).unwrap();
        let x = [x0, x1];
        prop_assert_eq!(perturbed_forward(&net, &x, &PerturbationVector::zeros(&net)).unwrap(), forward(&net, &x).unwrap());
    }

    #[test]
    fn margin_is_zero_exactly_when_misclassified(seed in 0u64..1000, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, y in 0usize..3) {
        let net = FeedforwardNet::random(&[2, 4, 3], Activation::Softplus, 1.0, seed).unwrap();
        let x = [x0, x1];
        let opt = MarginOptions { restarts: 1, penalty_stages: 4, steps_per_stage: 60, ..Default::default() };
        let m = all_layer_margin(&net, &x, y, &opt).unwrap();
        let wrong = stlab::linalg::argmax(&forward(&net, &x).unwrap()) != y;
        prop_assert_eq!(m.value == 0.0, wrong);
    }

    #[test]
    fn kl_loss_vanishes_at_its_reference(seed in 0u64..1000) {
        let net = FeedforwardNet::random(&[2, 4, 3], Activation::Tanh, 1.0, seed).unwrap();
        let x = vec![0.3, -0.4];
        let p = softmax(&forward(&net, &x).unwrap());
        let ex = Example { x, target: Target::Distribution(p), delta: None };
        let g = grad(&net, &LossSpec::KlToReference, &[ex]).unwrap();
        prop_assert!(g.loss.abs() < 1e-12);
        prop_assert!(g.weights.iter().all(|w| w.data.iter().all(|v| v.abs() < 1e-12)));
    }
}
