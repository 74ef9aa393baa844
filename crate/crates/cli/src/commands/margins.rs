use crate::io::{cell, load_config, load_population, opt_cell, out_path, write_csv, write_json};
use crate::{Common, Failure};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use stlab::bounds::generalization_rhs;
use stlab::dataspace::gen_two_moons;
use stlab::nets::{all_layer_margin, margin_lower_bound, predict, robust_all_layer_margin, Activation, MarginOptions};
use stlab::objectives::{Labeling, Pseudolabeler};
use stlab::selftrain::{train_pseudolabel, NetSpec, TrainConfig};

/// Slack allowed when comparing the lower bound with the optimizer margin.
const BOUND_SLACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginsConfig {
    /// Population file; two moons when absent.
    pub population: Option<PathBuf>,
    pub n_per_class: usize,
    pub noise: f64,
    pub net: NetSpec,
    /// Supervised training on the ground-truth labels.
    pub train: TrainConfig,
    /// Points evaluated, evenly spaced over the population.
    pub sample: usize,
    /// Radius of the robust margin.
    pub radius: f64,
    pub margin: MarginOptions,
    pub t_grid: Vec<f64>,
    pub delta: f64,
    pub seed: u64,
}

impl Default for MarginsConfig {
    fn default() -> Self {
        MarginsConfig {
            population: None,
            n_per_class: 100,
            noise: 0.1,
            net: NetSpec { hidden: vec![16], activation: Activation::Tanh, init_scale: 1.0 },
            train: TrainConfig { steps: 400, vat_enabled: false, ..TrainConfig::default() },
            sample: 60,
            radius: 0.1,
            margin: MarginOptions::default(),
            t_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
            delta: 0.05,
            seed: 0,
        }
    }
}

struct Row {
    index: usize,
    label: usize,
    predicted: usize,
    margin: f64,
    converged: bool,
    kappa: Option<f64>,
    robust: f64,
    robust_converged: bool,
}

pub fn run(common: &Common) -> Result<(), Failure> {
    let mut cfg: MarginsConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.margin.seed = cfg.seed;
    cfg.train.validate()?;
    if cfg.sample == 0 || cfg.t_grid.iter().any(|t| !(*t > 0.0)) || !(cfg.radius >= 0.0) {
        return Err(Failure::Config("need sample > 0, positive thresholds and radius >= 0".into()));
    }
    let pop = match &cfg.population {
        Some(p) => load_population(p)?,
        None => gen_two_moons(cfg.n_per_class, cfg.noise, &[0.0, 0.0], cfg.seed)?,
    };
    let net0 = cfg.net.build(pop.dim(), pop.num_classes().max(2), cfg.seed)?;
    let truth = Pseudolabeler::new(&pop, Labeling::ground_truth(&pop))?;
    let net = train_pseudolabel(&net0, &pop, &truth, &cfg.train)?.net;
    let n = cfg.sample.min(pop.len());
    let idx: Vec<usize> = (0..n).map(|i| i * pop.len() / n).collect();
    let rows: Vec<Row> = idx
        .par_iter()
        .map(|&i| -> Result<Row, Failure> {
            let x = pop.point(i);
            let y = pop.labels()[i];
            let m = all_layer_margin(&net, x, y, &cfg.margin)?;
            let kappa = margin_lower_bound(&net, x, y).ok().map(|k| k.bound);
            let rm = robust_all_layer_margin(&net, x, cfg.radius, &cfg.margin)?;
            Ok(Row {
                index: i,
                label: y,
                predicted: predict(&net, x)?,
                margin: m.value,
                converged: m.converged,
                kappa,
                robust: rm.value,
                robust_converged: rm.converged,
            })
        })
        .collect::<Result<_, _>>()?;
    let violations = rows.iter().filter(|r| r.converged && r.kappa.is_some_and(|k| k > r.margin + BOUND_SLACK)).count();
    let zero_iff_misclassified = rows.iter().all(|r| (r.margin == 0.0) == (r.predicted != r.label));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                r.label.to_string(),
                r.predicted.to_string(),
                (r.label == r.predicted).to_string(),
                cell(r.margin),
                r.converged.to_string(),
                opt_cell(r.kappa),
                r.kappa.map_or(String::new(), |k| (k <= r.margin + BOUND_SLACK).to_string()),
                cell(r.robust),
                r.robust_converged.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out_path(&common.out, "margins.csv"),
        &[
            "index",
            "label",
            "predicted",
            "correct",
            "margin",
            "converged",
            "kappa_bound",
            "bound_ok",
            "robust_margin",
            "robust_converged",
        ],
        &table,
    )?;
    let robust: Vec<f64> = rows.iter().map(|r| r.robust).collect();
    let terms =
        cfg.t_grid.iter().map(|&t| generalization_rhs(&net, &robust, t, cfg.delta)).collect::<Result<Vec<_>, _>>()?;
    let sweep: Vec<Vec<String>> = terms
        .iter()
        .map(|g| vec![cell(g.t), cell(g.empirical), cell(g.complexity), cell(g.zeta), cell(g.total)])
        .collect();
    write_csv(
        &out_path(&common.out, "generalization.csv"),
        &["t", "empirical", "complexity", "zeta", "total"],
        &sweep,
    )?;
    let converged = rows.iter().filter(|r| r.converged).count();
    println!(
        "{n} points: {converged} converged, {violations} lower-bound violations, zero margin iff misclassified: {zero_iff_misclassified}"
    );
    write_json(
        &out_path(&common.out, "report.json"),
        &serde_json::json!({
            "config": cfg,
            "points": n,
            "converged": converged,
            "bound_violations": violations,
            "zero_margin_iff_misclassified": zero_iff_misclassified,
            "generalization": terms,
        }),
    )
}
