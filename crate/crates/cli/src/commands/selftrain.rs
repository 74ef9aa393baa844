use crate::io::{cell, load_config, opt_cell, out_path, write_csv, write_json};
use crate::{Common, Failure};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stlab::selftrain::{
    denoise_experiment, shift_ladder, DenoiseResult, DenoiseSetup, Rung, ShiftRun, ShiftSetup, HISTORY_COLUMNS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Two-moons with clustered pseudolabel noise.
    #[default]
    Denoise,
    /// Source-to-target shift, one trained net per rung.
    Ladder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelftrainConfig {
    pub experiment: Experiment,
    /// Runs use seeds `seed, seed + 1, ...`.
    pub seeds: usize,
    pub seed: u64,
    pub denoise: DenoiseSetup,
    pub shift: ShiftSetup,
    pub rungs: Vec<Rung>,
    /// Allowed drop between consecutive rung means, in accuracy fraction.
    pub trend_tolerance: f64,
}

impl Default for SelftrainConfig {
    fn default() -> Self {
        SelftrainConfig {
            experiment: Experiment::Denoise,
            seeds: 5,
            seed: 0,
            denoise: DenoiseSetup::default(),
            shift: ShiftSetup::default(),
            rungs: Rung::ALL.to_vec(),
            trend_tolerance: 0.005,
        }
    }
}

fn seeds(cfg: &SelftrainConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
}

pub fn run(common: &Common) -> Result<(), Failure> {
    let mut cfg: SelftrainConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.seeds == 0 {
        return Err(Failure::Config("seeds must be positive".into()));
    }
    match cfg.experiment {
        Experiment::Denoise => {
            cfg.denoise.train.validate()?;
            denoise(common, &cfg)
        }
        Experiment::Ladder => {
            cfg.shift.train.validate()?;
            cfg.shift.source_train.validate()?;
            if cfg.rungs.is_empty() {
                return Err(Failure::Config("rungs must be nonempty".into()));
            }
            ladder(common, &cfg)
        }
    }
}

#[derive(Serialize)]
struct DenoiseSeed {
    seed: u64,
    pseudolabel_accuracy: f64,
    trained_accuracy: f64,
    improvement: f64,
    spearman: Option<f64>,
    mistakes: usize,
}

fn denoise(common: &Common, cfg: &SelftrainConfig) -> Result<(), Failure> {
    let results: Vec<DenoiseResult> =
        seeds(cfg).into_par_iter().map(|s| denoise_experiment(&cfg.denoise, s)).collect::<Result<_, _>>()?;
    let mut header = vec!["seed"];
    header.extend(HISTORY_COLUMNS);
    let history: Vec<Vec<String>> = results
        .iter()
        .flat_map(|r| {
            r.history.iter().map(move |h| {
                vec![
                    r.seed.to_string(),
                    h.step.to_string(),
                    cell(h.loss),
                    cell(h.err),
                    cell(h.err_unsup),
                    opt_cell(h.disagreement_pl),
                    cell(h.r_b_estimate),
                    cell(h.tau_i),
                    cell(h.ignored_fraction),
                ]
            })
        })
        .collect();
    write_csv(&out_path(&common.out, "history.csv"), &header, &history)?;
    let bins: Vec<Vec<String>> = results
        .iter()
        .flat_map(|r| {
            r.curve.bins.iter().enumerate().map(move |(i, b)| {
                vec![
                    r.seed.to_string(),
                    i.to_string(),
                    cell(b.lo),
                    cell(b.hi),
                    cell(b.mean_distance),
                    b.count.to_string(),
                    cell(b.corrected_rate),
                ]
            })
        })
        .collect();
    write_csv(
        &out_path(&common.out, "bins.csv"),
        &["seed", "bin", "lo", "hi", "mean_distance", "count", "corrected_rate"],
        &bins,
    )?;
    let per_seed: Vec<DenoiseSeed> = results
        .iter()
        .map(|r| DenoiseSeed {
            seed: r.seed,
            pseudolabel_accuracy: r.pseudolabel_accuracy,
            trained_accuracy: r.trained_accuracy,
            improvement: r.trained_accuracy - r.pseudolabel_accuracy,
            spearman: r.curve.spearman,
            mistakes: r.curve.mistakes,
        })
        .collect();
    let mean_improvement = per_seed.iter().map(|s| s.improvement).sum::<f64>() / per_seed.len() as f64;
    let negative = per_seed.iter().filter(|s| s.spearman.is_some_and(|v| v < 0.0)).count();
    for s in &per_seed {
        println!(
            "seed {}: pseudolabels {:.4} -> trained {:.4} (spearman {})",
            s.seed,
            s.pseudolabel_accuracy,
            s.trained_accuracy,
            s.spearman.map_or("n/a".into(), |v| format!("{v:.3}"))
        );
    }
    println!(
        "mean improvement {mean_improvement:.4}; negative rank correlation in {negative}/{} seeds",
        per_seed.len()
    );
    write_json(
        &out_path(&common.out, "report.json"),
        &serde_json::json!({
            "config": cfg,
            "seeds": per_seed,
            "mean_improvement": mean_improvement,
            "negative_spearman_seeds": negative,
        }),
    )
}

fn ladder(common: &Common, cfg: &SelftrainConfig) -> Result<(), Failure> {
    let runs: Vec<ShiftRun> =
        seeds(cfg).into_par_iter().map(|s| shift_ladder(&cfg.shift, &cfg.rungs, s)).collect::<Result<_, _>>()?;
    let rows: Vec<Vec<String>> = runs
        .iter()
        .flat_map(|run| {
            run.rungs.iter().map(move |(r, acc)| {
                vec![run.seed.to_string(), r.name().to_string(), cell(*acc), cell(run.pseudolabel_accuracy)]
            })
        })
        .collect();
    write_csv(&out_path(&common.out, "ladder.csv"), &["seed", "rung", "accuracy", "pseudolabel_accuracy"], &rows)?;
    let n = runs.len() as f64;
    let means: Vec<(Rung, f64)> = cfg
        .rungs
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, runs.iter().map(|run| run.rungs[i].1).sum::<f64>() / n))
        .collect();
    let pl_mean = runs.iter().map(|r| r.pseudolabel_accuracy).sum::<f64>() / n;
    let trend_ok: Vec<bool> = means.windows(2).map(|w| w[1].1 >= w[0].1 - cfg.trend_tolerance).collect();
    println!("pseudolabeler {pl_mean:.4}");
    for (r, m) in &means {
        println!("{:<20} {m:.4}", r.name());
    }
    write_json(
        &out_path(&common.out, "report.json"),
        &serde_json::json!({
            "config": cfg,
            "pseudolabel_mean": pl_mean,
            "means": means.iter().map(|(r, m)| serde_json::json!({ "rung": r, "name": r.name(), "mean_accuracy": m })).collect::<Vec<_>>(),
            "trend_ok": trend_ok,
        }),
    )
}
