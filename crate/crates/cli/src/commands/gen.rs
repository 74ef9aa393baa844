use crate::io::{load_config, out_path, write_json};
use crate::{Common, Failure};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use stlab::dataspace::{
    build_neighborhood_graph_with, gen_gaussian_mixture, gen_manifold_mixture, gen_two_moons, measure_separation,
    ManifoldGenerator, OverlapRule, TransformSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    #[default]
    Gaussian,
    TwoMoons,
    Manifold,
}

#[derive(Args, Debug, Default)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Number of classes
    #[arg(long)]
    pub k: Option<usize>,
    /// Ambient dimension
    #[arg(long)]
    pub d: Option<usize>,
    /// Points per class
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Ball radius for the reported separation
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub kind: Kind,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    /// Class means (gaussian) or offsets (manifold) default to
    /// `separation · e_i`.
    pub separation: f64,
    pub means: Option<Vec<Vec<f64>>>,
    pub mass_weights: Option<Vec<f64>>,
    /// Two-moons coordinate noise.
    pub noise: f64,
    pub shift: Vec<f64>,
    /// Latent dimension and generator shape for the manifold kind.
    pub latent_dim: usize,
    pub warp_scale: f64,
    pub warp_bend: f64,
    pub kappa_bound: f64,
    pub radius: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            kind: Kind::Gaussian,
            k: 2,
            d: 2,
            n: 100,
            separation: 3.0,
            means: None,
            mass_weights: None,
            noise: 0.1,
            shift: vec![0.0, 0.0],
            latent_dim: 2,
            warp_scale: 1.0,
            warp_bend: 0.5,
            kappa_bound: 10.0,
            radius: 0.5,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    n: usize,
    k: usize,
    d: usize,
    radius: f64,
    mu_hat: f64,
}

fn axis_vectors(k: usize, d: usize, scale: f64) -> Result<Vec<Vec<f64>>, Failure> {
    if k > d {
        return Err(Failure::Config(format!("default means need k <= d, got k = {k}, d = {d}; give explicit means")));
    }
    Ok((0..k).map(|i| (0..d).map(|j| if i == j { scale } else { 0.0 }).collect()).collect())
}

pub fn run(common: &Common, args: &GenArgs) -> Result<(), Failure> {
    let mut cfg: GenConfig = load_config(common.config.as_deref())?;
    if let Some(v) = args.kind {
        cfg.kind = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if let Some(v) = args.radius {
        cfg.radius = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    let weights = cfg.mass_weights.clone().unwrap_or_else(|| vec![1.0 / cfg.k.max(1) as f64; cfg.k]);
    let pop = match cfg.kind {
        Kind::Gaussian => {
            let means = match &cfg.means {
                Some(m) => m.clone(),
                None => axis_vectors(cfg.k, cfg.d, cfg.separation)?,
            };
            gen_gaussian_mixture(cfg.k, cfg.d, &means, &weights, cfg.n, cfg.seed)?
        }
        Kind::TwoMoons => {
            if cfg.k != 2 || cfg.d != 2 {
                return Err(Failure::Config("two-moons has k = 2 and d = 2".into()));
            }
            gen_two_moons(cfg.n, cfg.noise, &cfg.shift, cfg.seed)?
        }
        Kind::Manifold => {
            let offsets = axis_vectors(cfg.k, cfg.d, cfg.separation)?;
            let gens: Vec<ManifoldGenerator> = offsets
                .into_iter()
                .enumerate()
                .map(|(i, o)| ManifoldGenerator::warped(cfg.d, cfg.warp_scale, cfg.warp_bend, o, cfg.seed ^ i as u64))
                .collect();
            gen_manifold_mixture(cfg.k, cfg.latent_dim, cfg.d, &gens, cfg.kappa_bound, cfg.n, cfg.seed)?
        }
    };
    let graph = build_neighborhood_graph_with(&pop, &TransformSpec::ball(cfg.radius), OverlapRule::Witnessed)?;
    let summary = Summary {
        n: pop.len(),
        k: pop.num_classes(),
        d: pop.dim(),
        radius: cfg.radius,
        mu_hat: measure_separation(&graph),
    };
    println!("n={} K={} d={} mu_hat={} (r={})", summary.n, summary.k, summary.d, summary.mu_hat, summary.radius);
    write_json(
        &out_path(&common.out, "population.json"),
        &serde_json::json!({ "config": cfg, "summary": summary, "population": pop }),
    )
}
