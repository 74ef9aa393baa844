//! Acceptance criteria, one PASS/FAIL/FLAG line each. FLAG marks a
//! qualitative trend that missed its tolerance; it does not fail the run.
//! Oracles here are written independently of the library code they check.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;
use stlab::bounds::{reverify, run_suite, Status, SuiteConfig};
use stlab::expansion::halfspace_expansion_profile;
use stlab::linalg::Mat;
use stlab::nets::{
    all_layer_margin, grad, margin_lower_bound, Activation, Example, FeedforwardNet, LossSpec, MarginOptions,
    PerturbationVector, Target,
};
use stlab::selftrain::{denoise_experiment, shift_ladder, DenoiseSetup, Rung, ShiftSetup};

// Tolerances and sizes, pinned.
const SLACK_TOL: f64 = 1e-12;
const SUITE_INSTANCES: usize = 200;
const SUITE_MAX_POINTS: usize = 12;
const SUITE_MINUTES: f64 = 10.0;
const PROFILE_GRID: usize = 10_000;
const PROFILE_TARGET: f64 = 1.68269;
const PROFILE_TOL: f64 = 1e-4;
const PROFILE_FLOOR: f64 = 1.5;
const ZERO_MARGIN_CASES: usize = 1000;
const ONE_LAYER_CASES: usize = 500;
const ONE_LAYER_REL: f64 = 1e-3;
const ONE_LAYER_SHARE: f64 = 0.99;
const KAPPA_CASES: usize = 500;
const KAPPA_SLACK: f64 = 1e-6;
const LIPSCHITZ_PAIRS: usize = 200;
/// Twice the optimizer's margin slack.
const LIPSCHITZ_TOL: f64 = 2e-6;
const FD_NETS: usize = 100;
const FD_STEP: f64 = 1e-5;
const FD_REL: f64 = 1e-4;
/// Denominator floor of the relative error, for near-zero gradients.
const FD_FLOOR: f64 = 1e-3;
const DENOISE_SEEDS: u64 = 5;
const DENOISE_GAIN: f64 = 0.05;
const DENOISE_MIN_NEGATIVE: usize = 4;
const DENOISE_MINUTES: f64 = 5.0;
const LADDER_SEEDS: u64 = 5;
const LADDER_TOL: f64 = 0.005;

#[derive(PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Flag,
}

fn emit(id: &str, verdict: &Verdict, detail: &str) {
    let tag = match verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Flag => "FLAG",
    };
    // bypasses the test harness capture so the lines land in the log
    let _ = writeln!(std::io::stderr(), "[{tag}] {id}: {detail}");
}

fn pass_if(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// SplitMix64, for test inputs.
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next() % (hi - lo + 1) as u64) as usize
    }

    fn vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(-scale, scale)).collect()
    }
}

// ---------------------------------------------------------------------------
// Independent numerics
// ---------------------------------------------------------------------------

/// `Φ(x)` from the Taylor series of erf (accurate to ~1e-15 for |x| ≤ 3).
fn phi_series(x: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    let mut term = t;
    let mut sum = t;
    for n in 1..200 {
        term *= -t * t / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    0.5 + sum / std::f64::consts::PI.sqrt()
}

fn logits(net: &FeedforwardNet, x: &[f64]) -> Vec<f64> {
    let act = net.activation();
    let mut h = x.to_vec();
    let p = net.weights().len();
    for (i, w) in net.weights().iter().enumerate() {
        let z: Vec<f64> = (0..w.rows).map(|r| (0..w.cols).map(|c| w.data[r * w.cols + c] * h[c]).sum()).collect();
        h = if i + 1 < p { z.into_iter().map(|v| act.apply(v)).collect() } else { z };
    }
    h
}

fn top(z: &[f64]) -> usize {
    (0..z.len()).fold(0, |b, j| if z[j] > z[b] { j } else { b })
}

/// Largest singular value by power iteration on `AᵀA`.
fn spectral_norm(a: &Mat) -> f64 {
    let mut v = vec![1.0; a.cols];
    let mut s = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = (0..a.rows).map(|r| (0..a.cols).map(|c| a.data[r * a.cols + c] * v[c]).sum()).collect();
        let atav: Vec<f64> = (0..a.cols).map(|c| (0..a.rows).map(|r| a.data[r * a.cols + c] * av[r]).sum()).collect();
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        s = n.sqrt();
        v = atav.iter().map(|x| x / n).collect();
    }
    s
}

fn random_net(rng: &mut Rng, dims: &[usize], act: Activation, scale: f64) -> FeedforwardNet {
    FeedforwardNet::random(dims, act, scale, rng.next()).unwrap()
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn criteria_1_and_2() -> Vec<(String, Verdict, String)> {
    let t = Instant::now();
    let cfg = SuiteConfig { instances: SUITE_INSTANCES, max_points: SUITE_MAX_POINTS, ..SuiteConfig::default() };
    let out = run_suite(&cfg).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let mut refused = 0;
    let mut violated = 0;
    let mut skipped = 0;
    let mut inconsistent = 0;
    let mut min_slack = f64::INFINITY;
    for r in &out.reports {
        match r.status {
            Status::Refused => refused += 1,
            Status::Skipped => skipped += 1,
            Status::Violated => violated += 1,
            Status::Holds => {}
        }
        if matches!(r.status, Status::Holds | Status::Violated) {
            min_slack = min_slack.min(r.slack);
        }
        if r.advisory || !reverify(r).unwrap().consistent {
            inconsistent += 1;
        }
    }
    let n = out.seeds.len();
    let ok1 = n >= SUITE_INSTANCES
        && violated == 0
        && refused == 0
        && inconsistent == 0
        && min_slack >= -SLACK_TOL
        && secs < SUITE_MINUTES * 60.0;
    let d1 = format!(
        "{n} instances ({} drawn), {} reports: {violated} violated, {refused} refused, {skipped} outside hypothesis, \
         {inconsistent} non-exact or not re-verifiable; min slack {min_slack:e}; {secs:.1}s",
        out.attempts,
        out.reports.len()
    );
    let conv_fail = out.conversions.iter().filter(|c| !c.holds).count();
    let premises = out.conversions.iter().filter(|c| c.premise.certificate.holds).count();
    let exhaustive =
        out.conversions.iter().all(|c| c.premise.certificate.is_exhaustive() && c.derived.certificate.is_exhaustive());
    let covered = out.conversions.iter().filter(|c| c.lemma == stlab::bounds::ConversionId::MultToConstant).count()
        >= n * cfg.xis.len();
    let ok2 = conv_fail == 0 && exhaustive && covered && premises > 0;
    let d2 = format!(
        "{} derived certificates on the same instances ({premises} with a holding premise): {conv_fail} violations",
        out.conversions.len()
    );
    vec![("1 theorem suite".into(), pass_if(ok1), d1), ("2 conversion lemmas".into(), pass_if(ok2), d2)]
}

fn criterion_3() -> (Verdict, String) {
    let t = Instant::now();
    let grid: Vec<f64> = (1..=PROFILE_GRID).map(|i| 0.5 * i as f64 / PROFILE_GRID as f64).collect();
    let profile = halfspace_expansion_profile(1.0, &grid).unwrap();
    let min = profile.iter().cloned().fold(f64::INFINITY, f64::min);
    let secs = t.elapsed().as_secs_f64();
    let oracle = phi_series(1.0) / 0.5;
    let ok = (min - PROFILE_TARGET).abs() <= PROFILE_TOL
        && (min - oracle).abs() <= PROFILE_TOL
        && min >= PROFILE_FLOOR
        && secs < 1.0;
    (
        pass_if(ok),
        format!(
            "min profile {min:.6} (series oracle {oracle:.6}, target {PROFILE_TARGET} ± {PROFILE_TOL}); {secs:.3}s"
        ),
    )
}

fn criterion_4a(rng: &mut Rng) -> (Verdict, String) {
    let opt = MarginOptions { restarts: 1, penalty_stages: 4, steps_per_stage: 60, ..MarginOptions::default() };
    let mut bad = 0;
    let mut wrong = 0;
    for i in 0..ZERO_MARGIN_CASES {
        let d = rng.int(2, 4);
        let k = rng.int(2, 4);
        let act = if i % 2 == 0 { Activation::Softplus } else { Activation::Tanh };
        let h = rng.int(2, 8);
        let net = random_net(rng, &[d, h, k], act, 1.0);
        let x = rng.vec(d, 2.0);
        let y = rng.int(0, k - 1);
        let mis = top(&logits(&net, &x)) != y;
        wrong += mis as usize;
        let m = all_layer_margin(&net, &x, y, &opt).unwrap();
        if (m.value == 0.0) != mis {
            bad += 1;
        }
    }
    (pass_if(bad == 0), format!("{ZERO_MARGIN_CASES} cases ({wrong} misclassified): {bad} mismatches"))
}

fn criterion_4b(rng: &mut Rng) -> (Verdict, String) {
    let opt = MarginOptions::default();
    let mut converged = 0;
    let mut close = 0;
    let mut attempts = 0;
    while converged < ONE_LAYER_CASES && attempts < 2 * ONE_LAYER_CASES {
        attempts += 1;
        let d = rng.int(2, 6);
        let k = rng.int(2, 4);
        let net = random_net(rng, &[d, k], Activation::Softplus, 1.0);
        let x = rng.vec(d, 1.5);
        let z = logits(&net, &x);
        let y = top(&z);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gap = (0..k).filter(|&j| j != y).map(|j| z[y] - z[j]).fold(f64::INFINITY, f64::min);
        let exact = gap / (std::f64::consts::SQRT_2 * norm);
        let m = all_layer_margin(&net, &x, y, &opt).unwrap();
        if !m.converged {
            continue;
        }
        converged += 1;
        if (m.value - exact).abs() <= ONE_LAYER_REL * exact {
            close += 1;
        }
    }
    let share = close as f64 / converged.max(1) as f64;
    (
        pass_if(converged >= ONE_LAYER_CASES && share >= ONE_LAYER_SHARE),
        format!("{close}/{converged} converged one-layer margins within {ONE_LAYER_REL} of the closed form ({attempts} drawn)"),
    )
}

fn criterion_4c(rng: &mut Rng) -> (Verdict, String) {
    let opt = MarginOptions::default();
    let mut converged = 0;
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for i in 0..KAPPA_CASES {
        let d = rng.int(2, 4);
        let mut dims = vec![d];
        for _ in 0..rng.int(1, 2) {
            dims.push(rng.int(3, 8));
        }
        dims.push(rng.int(2, 3));
        let act = if i % 2 == 0 { Activation::Softplus } else { Activation::Tanh };
        let net = random_net(rng, &dims, act, 1.0);
        let x = rng.vec(d, 1.5);
        let y = top(&logits(&net, &x));
        let m = all_layer_margin(&net, &x, y, &opt).unwrap();
        let Ok(kb) = margin_lower_bound(&net, &x, y) else { continue };
        if !m.converged {
            continue;
        }
        converged += 1;
        worst_ratio = worst_ratio.max(kb.bound / m.value);
        if kb.bound > m.value + KAPPA_SLACK {
            violations += 1;
        }
    }
    (
        pass_if(violations == 0 && converged > 0),
        format!("{converged}/{KAPPA_CASES} converged multi-layer cases: {violations} with bound > margin + {KAPPA_SLACK}; max bound/margin {worst_ratio:.3}"),
    )
}

fn criterion_4d(rng: &mut Rng) -> (Verdict, String) {
    // tanh keeps ‖φ(h)‖ ≤ ‖h‖, which the Lipschitz property relies on
    let opt = MarginOptions::default();
    let mut checked = 0;
    let mut violations = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..LIPSCHITZ_PAIRS {
        let d = rng.int(2, 4);
        let dims = [d, rng.int(3, 8), rng.int(2, 3)];
        let net = random_net(rng, &dims, Activation::Tanh, 1.5);
        let scale = rng.range(0.005, 0.05);
        let moved: Vec<Mat> = net
            .weights()
            .iter()
            .map(|w| Mat { data: w.data.iter().map(|v| v + rng.range(-scale, scale)).collect(), ..w.clone() })
            .collect();
        let net2 = net.with_weights(moved).unwrap();
        let dist = net
            .weights()
            .iter()
            .zip(net2.weights())
            .map(|(a, b)| {
                let diff = Mat { data: a.data.iter().zip(&b.data).map(|(u, v)| u - v).collect(), ..a.clone() };
                spectral_norm(&diff).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        let x = rng.vec(d, 1.5);
        let y = top(&logits(&net, &x));
        let m1 = all_layer_margin(&net, &x, y, &opt).unwrap();
        let m2 = all_layer_margin(&net2, &x, y, &opt).unwrap();
        if !(m1.converged && m2.converged) {
            continue;
        }
        checked += 1;
        let excess = (m1.value - m2.value).abs() - dist;
        worst = worst.max(excess);
        if excess > LIPSCHITZ_TOL {
            violations += 1;
        }
    }
    (
        pass_if(violations == 0 && checked > 0),
        format!("{checked}/{LIPSCHITZ_PAIRS} converged pairs: {violations} with |Δm| > weight distance + {LIPSCHITZ_TOL}; max excess {worst:e}"),
    )
}

fn loss_at(net: &FeedforwardNet, loss: &LossSpec, batch: &[Example]) -> f64 {
    grad(net, loss, batch).unwrap().loss
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Worst relative error of every weight, input and perturbation gradient.
fn fd_worst(net: &FeedforwardNet, loss: &LossSpec, batch: &[Example]) -> f64 {
    let g = grad(net, loss, batch).unwrap();
    let mut worst: f64 = 0.0;
    for l in 0..net.weights().len() {
        for k in 0..net.weights()[l].data.len() {
            let mut p = net.weights().to_vec();
            let mut m = net.weights().to_vec();
            p[l].data[k] += FD_STEP;
            m[l].data[k] -= FD_STEP;
            let fd = (loss_at(&net.with_weights(p).unwrap(), loss, batch)
                - loss_at(&net.with_weights(m).unwrap(), loss, batch))
                / (2.0 * FD_STEP);
            worst = worst.max(rel(fd, g.weights[l].data[k]));
        }
    }
    for b in 0..batch.len() {
        for k in 0..batch[b].x.len() {
            let (mut p, mut m) = (batch.to_vec(), batch.to_vec());
            p[b].x[k] += FD_STEP;
            m[b].x[k] -= FD_STEP;
            let fd = (loss_at(net, loss, &p) - loss_at(net, loss, &m)) / (2.0 * FD_STEP);
            worst = worst.max(rel(fd, g.inputs[b][k]));
        }
        if let Some(d) = &batch[b].delta {
            for l in 0..d.layers.len() {
                for k in 0..d.layers[l].len() {
                    let (mut p, mut m) = (batch.to_vec(), batch.to_vec());
                    p[b].delta.as_mut().unwrap().layers[l][k] += FD_STEP;
                    m[b].delta.as_mut().unwrap().layers[l][k] -= FD_STEP;
                    let fd = (loss_at(net, loss, &p) - loss_at(net, loss, &m)) / (2.0 * FD_STEP);
                    worst = worst.max(rel(fd, g.deltas[b].as_ref().unwrap().layers[l][k]));
                }
            }
        }
    }
    worst
}

fn criterion_5(rng: &mut Rng) -> (Verdict, String) {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for i in 0..FD_NETS {
        let depth = rng.int(1, 3);
        let mut dims = vec![rng.int(2, 5)];
        for _ in 1..depth {
            dims.push(rng.int(2, 16));
        }
        dims.push(rng.int(2, 4));
        let act = if i % 2 == 0 { Activation::Softplus } else { Activation::Tanh };
        let net = random_net(rng, &dims, act, 1.0);
        let k = net.num_classes();
        let delta = |rng: &mut Rng| {
            let mut d = PerturbationVector::zeros(&net);
            d.layers.iter_mut().for_each(|l| l.iter_mut().for_each(|v| *v = rng.range(-0.15, 0.15)));
            d
        };
        for with_delta in [false, true] {
            let xs: Vec<Vec<f64>> = (0..3).map(|_| rng.vec(dims[0], 1.0)).collect();
            let deltas: Vec<Option<PerturbationVector>> = (0..3).map(|_| with_delta.then(|| delta(rng))).collect();
            let make = |targets: Vec<Target>| -> Vec<Example> {
                xs.iter()
                    .zip(&deltas)
                    .zip(targets)
                    .map(|((x, d), target)| Example { x: x.clone(), target, delta: d.clone() })
                    .collect()
            };
            let classes: Vec<Target> = (0..3).map(|_| Target::Class(rng.int(0, k - 1))).collect();
            let refs: Vec<Target> = (0..3)
                .map(|_| {
                    let w: Vec<f64> = (0..k).map(|_| rng.range(0.1, 1.0)).collect();
                    let s: f64 = w.iter().sum();
                    Target::Distribution(w.iter().map(|v| v / s).collect())
                })
                .collect();
            for (loss, batch) in [
                (LossSpec::CrossEntropy, make(classes)),
                (LossSpec::KlToReference, make(refs)),
                (LossSpec::MinEntropy, make(vec![Target::None, Target::None, Target::None])),
            ] {
                worst = worst.max(fd_worst(&net, &loss, &batch));
                checks += 1;
            }
            if with_delta {
                // hinge active: target is the class predicted under the perturbation
                let tops: Vec<Target> = xs
                    .iter()
                    .zip(&deltas)
                    .map(|(x, d)| {
                        Target::Class(top(&stlab::nets::perturbed_forward(&net, x, d.as_ref().unwrap()).unwrap()))
                    })
                    .collect();
                worst = worst.max(fd_worst(&net, &LossSpec::MarginPenalty { penalty: 2.0, slack: 1e-3 }, &make(tops)));
                checks += 1;
            }
        }
    }
    (pass_if(worst <= FD_REL), format!("{checks} (net, loss) checks on {FD_NETS} nets: worst relative error {worst:e}"))
}

fn criterion_6() -> (Verdict, String) {
    let t = Instant::now();
    let setup = DenoiseSetup::default();
    let runs: Vec<_> = (0..DENOISE_SEEDS).map(|s| denoise_experiment(&setup, s).unwrap()).collect();
    let secs = t.elapsed().as_secs_f64();
    let gain = runs.iter().map(|r| r.trained_accuracy - r.pseudolabel_accuracy).sum::<f64>() / runs.len() as f64;
    let negative = runs.iter().filter(|r| r.curve.spearman.is_some_and(|s| s < 0.0)).count();
    let ok = gain >= DENOISE_GAIN && negative >= DENOISE_MIN_NEGATIVE && secs < DENOISE_MINUTES * 60.0;
    (
        pass_if(ok),
        format!(
            "mean accuracy gain {:.2} points over the pseudolabeler; negative rank correlation in {negative}/{DENOISE_SEEDS} seeds; {secs:.1}s",
            100.0 * gain
        ),
    )
}

fn criterion_7() -> (Verdict, String) {
    let rungs = [Rung::Pl, Rung::PlVat, Rung::PlVatAmo];
    let setup = ShiftSetup::default();
    let runs: Vec<_> = (0..LADDER_SEEDS).map(|s| shift_ladder(&setup, &rungs, s).unwrap()).collect();
    let means: Vec<f64> =
        (0..rungs.len()).map(|i| runs.iter().map(|r| r.rungs[i].1).sum::<f64>() / runs.len() as f64).collect();
    let pl = runs.iter().map(|r| r.pseudolabel_accuracy).sum::<f64>() / runs.len() as f64;
    let ok = means.windows(2).all(|w| w[1] >= w[0] - LADDER_TOL);
    let text =
        rungs.iter().zip(&means).map(|(r, m)| format!("{} {:.2}", r.name(), 100.0 * m)).collect::<Vec<_>>().join(", ");
    (
        if ok { Verdict::Pass } else { Verdict::Flag },
        format!("pseudolabeler {:.2}; {text} (tolerance {} points per rung)", 100.0 * pl, 100.0 * LADDER_TOL),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_stlab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .current_dir(dir.parent().unwrap())
        .output()
        .expect("binary runs");
    status.status.code().unwrap_or(-1)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

fn criterion_8() -> (Verdict, String) {
    let root = tempfile::tempdir().unwrap();
    let w = root.path();
    let write = |name: &str, text: &str| std::fs::write(w.join(name), text).unwrap();
    write("moons.json", r#"{"kind": "two_moons", "n": 6, "radius": 0.5}"#);
    write("exp.json", r#"{"population": "moons/population.json", "radius": 0.5}"#);
    write(
        "exp_sampled.json",
        r#"{"population": "gauss/population.json", "radius": 0.5, "property": {"kind": "multiplicative", "a": 0.5, "c": 1.5}, "budget": 20000}"#,
    );
    write("verify.json", r#"{"suite": {"instances": 20, "max_points": 9}}"#);
    write(
        "denoise.json",
        r#"{"seeds": 2, "denoise": {"n_per_class": 60, "bins": 3, "train": {"steps": 150, "eval_every": 50}}}"#,
    );
    write(
        "ladder.json",
        r#"{"experiment": "ladder", "seeds": 2, "rungs": ["pl", "pl_vat", "pl_vat_amo"],
            "shift": {"n_per_class": 50, "source_train": {"steps": 100}, "train": {"steps": 100, "vat_radius": 0.1}}}"#,
    );
    write("margins.json", r#"{"n_per_class": 30, "sample": 8, "train": {"steps": 100, "vat_enabled": false}}"#);
    // later steps read files written by earlier ones, so both passes keep this order
    let steps: Vec<(&str, Vec<&str>)> = vec![
        ("gauss", vec!["gen", "--kind", "gaussian", "--k", "2", "--d", "16", "--n", "500", "--seed", "7"]),
        ("moons", vec!["gen", "--config", "moons.json", "--seed", "3"]),
        ("exp", vec!["expansion", "--config", "exp.json"]),
        ("exp_sampled", vec!["expansion", "--config", "exp_sampled.json", "--mode", "sampled", "--seed", "5"]),
        ("verify", vec!["verify-theorems", "--config", "verify.json", "--seed", "1"]),
        ("denoise", vec!["selftrain", "--config", "denoise.json", "--seed", "2"]),
        ("ladder", vec!["selftrain", "--config", "ladder.json", "--seed", "2"]),
        ("margins", vec!["margins", "--config", "margins.json", "--seed", "4"]),
    ];
    let mut problems = Vec::new();
    let mut compared = 0;
    let mut first: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for pass in 0..2 {
        for (i, (name, args)) in steps.iter().enumerate() {
            let dir = if pass == 0 { w.join(name) } else { w.join(format!("{name}_again")) };
            std::fs::create_dir_all(&dir).unwrap();
            let jobs = if pass == 0 { "1" } else { "2" };
            let mut a = args.clone();
            a.extend(["--jobs", jobs]);
            let code = run_cli(&a, &dir);
            if code != 0 {
                problems.push(format!("{name} exited {code}"));
                continue;
            }
            let got = files(&dir);
            if pass == 0 {
                first.push(got);
            } else if got != first[i] {
                problems.push(format!("{name} output differs"));
            } else {
                compared += got.len();
            }
        }
    }
    let ok = problems.is_empty() && compared > 0;
    let detail = if ok {
        format!("{} commands re-run with different --out and --jobs: {compared} files byte-identical", steps.len())
    } else {
        problems.join("; ")
    };
    (pass_if(ok), detail)
}

#[test]
fn acceptance() {
    let mut results: Vec<(String, Verdict, String)> = Vec::new();
    let mut push = |id: &str, (v, d): (Verdict, String)| {
        emit(id, &v, &d);
        results.push((id.to_string(), v, d));
    };
    for (id, v, d) in criteria_1_and_2() {
        push(&id, (v, d));
    }
    push("3 gaussian profile", criterion_3());
    let mut rng = Rng(20_240_601);
    push("4a zero margin iff misclassified", criterion_4a(&mut rng));
    push("4b one-layer closed form", criterion_4b(&mut rng));
    push("4c lower bound", criterion_4c(&mut rng));
    push("4d margin Lipschitz in weights", criterion_4d(&mut rng));
    push("5 gradient fidelity", criterion_5(&mut rng));
    push("6 denoising", criterion_6());
    push("7 ablation ladder", criterion_7());
    push("8 determinism", criterion_8());
    let failed: Vec<&str> = results.iter().filter(|r| r.1 == Verdict::Fail).map(|r| r.0.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
