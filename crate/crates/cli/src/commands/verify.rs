use crate::io::{load_config, load_json, out_path, write_json, write_lines};
use crate::{Common, Failure, ModeArg};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use stlab::bounds::{
    check_lemma_pop_denoise, check_lemma_unsup, check_theorem_additive_all, check_theorem_denoise, check_theorem_unsup,
    run_suite, ConversionReport, Instance, Status, SuiteConfig, TheoremCheckReport,
};
use stlab::expansion::min_additive_q;
use stlab::objectives::err;
use stlab::selftrain::MinimizerOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Random qualifying instances; used unless `instance` is given.
    pub suite: SuiteConfig,
    /// A single instance file (population, transform, rule, pseudolabels).
    pub instance: Option<PathBuf>,
    /// Expansion factors; the largest certified ones when absent.
    pub c_bar: Option<f64>,
    pub c: Option<f64>,
    /// Additive parameters; `α = err_pl/2` and the smallest certified `q`
    /// when absent.
    pub q: Option<f64>,
    pub alpha: Option<f64>,
    pub minimizer: MinimizerOptions,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            suite: SuiteConfig::default(),
            instance: None,
            c_bar: None,
            c: None,
            q: None,
            alpha: None,
            minimizer: MinimizerOptions { require_exact: true, ..MinimizerOptions::default() },
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a VerifyConfig,
    instances: usize,
    attempts: Option<u64>,
    seeds: Option<&'a [u64]>,
    counts: BTreeMap<String, usize>,
    conversions: usize,
    conversion_violations: usize,
    violations: usize,
    min_slack: Option<f64>,
}

fn print_line(r: &TheoremCheckReport) {
    let check = serde_json::to_value(r.check).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    match r.status {
        Status::Holds | Status::Violated => {
            println!("{check}: {:?} lhs={} rhs={} slack={}", r.status, r.lhs, r.rhs, r.slack)
        }
        _ => println!("{check}: {:?} ({})", r.status, r.reason.as_deref().unwrap_or("")),
    }
}

fn single(cfg: &VerifyConfig, path: &std::path::Path) -> Result<Vec<TheoremCheckReport>, Failure> {
    let instance: Instance = load_json(path)?;
    let graph = instance.graph()?;
    let mut reports = Vec::new();
    if let Some(pl) = instance.pseudolabeler()? {
        reports.push(check_lemma_pop_denoise(&graph, &pl, cfg.c_bar)?);
        reports.push(check_theorem_denoise(&graph, &pl, cfg.c_bar, &cfg.minimizer)?);
        let alpha = match cfg.alpha {
            Some(a) => a,
            None => 0.5 * err(graph.population(), pl.labeling())?,
        };
        let q = match cfg.q {
            Some(q) => q,
            None => min_additive_q(&graph, pl.mistakes(), alpha)?,
        };
        reports.push(check_theorem_additive_all(&graph, &pl, q, alpha)?);
    }
    reports.push(check_theorem_unsup(&graph, cfg.c, &cfg.minimizer)?);
    reports.push(check_lemma_unsup(&graph, cfg.c)?);
    Ok(reports)
}

pub fn run(common: &Common) -> Result<(), Failure> {
    let mut cfg: VerifyConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.suite.seed = cfg.seed;
    cfg.minimizer.seed = cfg.seed;
    cfg.suite.minimizer = cfg.minimizer.clone();
    if common.mode == Some(ModeArg::Sampled) {
        return Err(Failure::Refused("theorem checks need exhaustive certificates".into()));
    }
    let (reports, conversions, attempts, seeds): (Vec<TheoremCheckReport>, Vec<ConversionReport>, _, _) =
        match &cfg.instance {
            Some(path) => (single(&cfg, path)?, Vec::new(), None, None),
            None => {
                cfg.suite.validate()?;
                let out = run_suite(&cfg.suite)?;
                (out.reports, out.conversions, Some(out.attempts), Some(out.seeds))
            }
        };
    if cfg.instance.is_some() {
        reports.iter().for_each(print_line);
    }
    let mut counts = BTreeMap::new();
    for r in &reports {
        let key = format!(
            "{}/{}",
            serde_json::to_value(r.check).map_err(anyhow::Error::from)?.as_str().unwrap_or(""),
            serde_json::to_value(r.status).map_err(anyhow::Error::from)?.as_str().unwrap_or("")
        );
        *counts.entry(key).or_insert(0) += 1;
    }
    let violations = reports.iter().filter(|r| r.status == Status::Violated).count();
    let conversion_violations = conversions.iter().filter(|c| !c.holds).count();
    let min_slack = reports
        .iter()
        .filter(|r| matches!(r.status, Status::Holds | Status::Violated))
        .map(|r| r.slack)
        .min_by(f64::total_cmp);
    let summary = Summary {
        config: &cfg,
        instances: seeds.as_ref().map_or(1, |s| s.len()),
        attempts,
        seeds: seeds.as_deref(),
        counts,
        conversions: conversions.len(),
        conversion_violations,
        violations,
        min_slack,
    };
    write_lines(&out_path(&common.out, "reports.jsonl"), reports.iter().map(|r| r.to_json_line()))?;
    write_lines(
        &out_path(&common.out, "conversions.jsonl"),
        conversions.iter().map(|c| serde_json::to_string(c).expect("conversion reports serialize")),
    )?;
    write_json(&out_path(&common.out, "summary.json"), &summary)?;
    println!(
        "{} reports, {} violations; {} conversions, {} violations; min slack {}",
        reports.len(),
        violations,
        conversions.len(),
        conversion_violations,
        min_slack.map_or("n/a".into(), |s| s.to_string())
    );
    if cfg.instance.is_some() && reports.iter().any(|r| r.status == Status::Refused) {
        return Err(Failure::Refused("at least one check's preconditions are unmet".into()));
    }
    Ok(())
}
