use crate::io::{load_config, load_population, out_path, write_json};
use crate::{Common, Failure, ModeArg};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use stlab::dataspace::{build_neighborhood_graph_with, Augmentation, OverlapRule, TransformSpec};
use stlab::expansion::{
    check_additive_expansion, check_constant_expansion, check_mult_expansion, max_mult_factor, SearchMode,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Property {
    /// `c` absent: report the largest certified factor at `a` and certify it.
    Multiplicative {
        a: f64,
        c: Option<f64>,
    },
    Additive {
        set: Vec<usize>,
        q: f64,
        alpha: f64,
    },
    Constant {
        q: f64,
        xi: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionConfig {
    pub population: Option<PathBuf>,
    pub radius: f64,
    pub augmentations: Vec<Augmentation>,
    pub rule: OverlapRule,
    pub property: Property,
    pub mode: ModeArg,
    /// Sets examined in sampled mode.
    pub budget: u64,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            population: None,
            radius: 0.5,
            augmentations: vec![Augmentation::Identity],
            rule: OverlapRule::Witnessed,
            property: Property::Multiplicative { a: 0.5, c: None },
            mode: ModeArg::Exhaustive,
            budget: 100_000,
            seed: 0,
        }
    }
}

pub fn run(common: &Common) -> Result<(), Failure> {
    let mut cfg: ExpansionConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    let path = cfg.population.clone().ok_or_else(|| Failure::Config("config needs a population file".into()))?;
    let pop = load_population(&path)?;
    let transform = TransformSpec { radius: cfg.radius, augmentations: cfg.augmentations.clone() };
    let graph = build_neighborhood_graph_with(&pop, &transform, cfg.rule)?;
    let mode = match cfg.mode {
        ModeArg::Exhaustive => SearchMode::Exhaustive,
        ModeArg::Sampled => SearchMode::Sampled { budget: cfg.budget, seed: cfg.seed },
    };
    let outcome = (|| -> Result<_, Failure> {
        Ok(match &cfg.property {
            Property::Multiplicative { a, c } => {
                let (factor, witness) = match c {
                    Some(c) => (*c, None),
                    None => {
                        if mode != SearchMode::Exhaustive {
                            return Err(Failure::Config("the largest factor needs exhaustive mode; give c".into()));
                        }
                        let (f, w) = max_mult_factor(&graph, *a)?;
                        (f, Some(w))
                    }
                };
                let cert = check_mult_expansion(&graph, *a, factor, mode)?;
                let max = witness.map(|w| serde_json::json!({ "value": factor_json(factor), "witness": w }));
                (cert, max)
            }
            Property::Additive { set, q, alpha } => (check_additive_expansion(&graph, set, *q, *alpha, mode)?, None),
            Property::Constant { q, xi } => (check_constant_expansion(&graph, *q, *xi, mode)?, None),
        })
    })();
    let file = out_path(&common.out, "certificate.json");
    match outcome {
        Ok((cert, max)) => {
            println!(
                "{} {}: holds={} examined={}",
                cert.mode,
                serde_json::to_string(&cert.params).unwrap_or_default(),
                cert.holds,
                cert.examined
            );
            write_json(&file, &serde_json::json!({ "config": cfg, "certificate": cert, "max_factor": max }))
        }
        Err(Failure::Refused(reason)) => {
            write_json(&file, &serde_json::json!({ "config": cfg, "refused": reason }))?;
            Err(Failure::Refused(reason))
        }
        Err(e) => Err(e),
    }
}

/// JSON form of a factor: a number, or `"inf"`.
fn factor_json(f: f64) -> serde_json::Value {
    if f.is_finite() {
        serde_json::json!(f)
    } else {
        serde_json::json!("inf")
    }
}
