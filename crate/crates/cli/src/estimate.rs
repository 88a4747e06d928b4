use std::str::FromStr;

use anyhow::{anyhow, bail};
use serde::{Deserialize, Serialize};
use sparse_ps::baseline::estimate_ps;
use sparse_ps::bsps::{run_bsps_chain, summarize_posterior, ChainConfig, PosteriorSample};
use sparse_ps::io::{load_dataset_csv, write_chain_csv};
use sparse_ps::lasso::estimate_lasso;
use sparse_ps::obsps::run_obsps_chain;
use sparse_ps::report::failure_key;
use sparse_ps::rng::{SeedTree, STREAM_BSPS, STREAM_LASSO, STREAM_OBSPS};
use sparse_ps::{EstimateReport, Method, ModelIndicator, PriorConfig};

use crate::manifest::RunManifest;
use crate::{config, CliError, EstimateArgs};

pub const ESTIMATE_FILE: &str = "estimate.json";
pub const DRAWS_FILE: &str = "draws.csv";

/// Scalar prior hyperparameters, broadcast over coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorScalars {
    pub nu0: f64,
    pub nu1: f64,
    pub w: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub xi: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PriorScalars {
    fn default() -> Self {
        let p = PriorConfig::default_for(1);
        Self {
            nu0: p.nu0,
            nu1: p.nu1,
            w: p.w[0],
            gamma0: p.gamma0,
            gamma1: p.gamma1,
            xi: p.xi[0],
            c1: p.c1,
            c2: p.c2,
        }
    }
}

impl PriorScalars {
    pub fn build(&self, d: usize) -> PriorConfig {
        PriorConfig {
            c1: self.c1,
            c2: self.c2,
            ..PriorConfig::broadcast(
                d,
                self.nu0,
                self.nu1,
                self.w,
                self.gamma0,
                self.gamma1,
                self.xi,
            )
        }
    }
}

/// Settings of `estimate`; every field is optional in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub seed: u64,
    pub folds: usize,
    pub bsps: ChainConfig,
    pub obsps: ChainConfig,
    pub priors: PriorScalars,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 5,
            bsps: ChainConfig::default(),
            obsps: ChainConfig::default(),
            priors: PriorScalars::default(),
        }
    }
}

pub fn run(args: EstimateArgs) -> u8 {
    let mut manifest = RunManifest::start("estimate", args.run.config.as_deref());
    manifest.overrides = args.run.sets.clone();
    let out = args.run.out.clone();
    let outcome = estimate(&args, &mut manifest);
    manifest.finish(&out, outcome)
}

fn resolve(args: &EstimateArgs) -> Result<EstimateConfig, CliError> {
    let mut cfg: EstimateConfig = config::load(args.run.config.as_deref(), &args.run.sets)?;
    if let Some(s) = args.run.seed {
        cfg.seed = s;
    }
    for chain in [&mut cfg.bsps, &mut cfg.obsps] {
        if let Some(b) = args.run.burn_in {
            chain.burn_in = b;
        }
        if let Some(k) = args.run.kept {
            chain.kept = k;
        }
    }
    Ok(cfg)
}

/// Maps covariate names to column indices (intercept is column 0).
fn support_from_names(names: &[String], covariates: &[String]) -> anyhow::Result<ModelIndicator> {
    let mut active = Vec::with_capacity(names.len());
    for name in names {
        match covariates.iter().position(|c| c == name) {
            Some(k) => active.push(k + 1),
            None => bail!("unknown covariate `{name}` in --support"),
        }
    }
    Ok(ModelIndicator::from_active(covariates.len() + 1, &active))
}

fn estimate(args: &EstimateArgs, manifest: &mut RunManifest) -> Result<u8, CliError> {
    let cfg = resolve(args)?;
    manifest.seed = Some(cfg.seed);
    let method = Method::from_str(&args.method).map_err(CliError::user)?;
    let loaded = load_dataset_csv(&args.data)
        .map_err(|e| CliError::user(anyhow!("{}: {e}", args.data.display())))?;
    let data = &loaded.dataset;
    let d = data.dim();
    let priors = cfg.priors.build(d);
    priors.validate(d).map_err(CliError::user)?;
    if cfg.folds < 2 {
        return Err(CliError::user(anyhow!("folds must be at least 2")));
    }
    let out = &args.run.out;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::user(anyhow!("creating {}: {e}", out.display())))?;

    let tree = SeedTree::new(cfg.seed);
    let mut sample: Option<PosteriorSample> = None;
    let report = match method {
        Method::Ps => estimate_ps(data, &ModelIndicator::all(d), Method::Ps),
        Method::Tps => {
            if args.support.is_empty() {
                return Err(CliError::user(anyhow!(
                    "tps needs --support naming the response-model covariates"
                )));
            }
            let support = support_from_names(&args.support, &loaded.covariates)?;
            estimate_ps(data, &support, Method::Tps)
        }
        Method::Lasso => estimate_lasso(data, cfg.folds, &mut tree.stream(&[STREAM_LASSO])),
        Method::Bsps | Method::Obsps => {
            let run = if method == Method::Bsps {
                run_bsps_chain(
                    data,
                    &priors,
                    cfg.bsps.burn_in,
                    cfg.bsps.kept,
                    tree.child_seed(&[STREAM_BSPS]),
                )
            } else {
                run_obsps_chain(
                    data,
                    &priors,
                    cfg.obsps.burn_in,
                    cfg.obsps.kept,
                    tree.child_seed(&[STREAM_OBSPS]),
                )
            };
            match run {
                Ok(s) => {
                    let r = summarize_posterior(&s, 0.95);
                    sample = Some(s);
                    r
                }
                Err(sparse_ps::Error::InvalidArgument(m)) => {
                    return Err(CliError::user(anyhow!(m)))
                }
                Err(e) => EstimateReport::failed(method, failure_key(&e)),
            }
        }
    };

    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    manifest.write_output(out, ESTIMATE_FILE, &json)?;
    if let (true, Some(s)) = (args.save_draws, &sample) {
        let mut buf = Vec::new();
        write_chain_csv(s, &mut buf).map_err(CliError::user)?;
        manifest.write_output(out, DRAWS_FILE, &buf)?;
    }
    print_summary(&report, &loaded.covariates);
    if report.converged {
        Ok(0)
    } else {
        Err(CliError::compute(anyhow!(
            "{method} did not converge: {:?}",
            report.diagnostics
        )))
    }
}

fn print_summary(r: &EstimateReport, covariates: &[String]) {
    println!("method    {}", r.method);
    println!("theta_hat {:.6}", r.theta_hat);
    println!("se_hat    {:.6}", r.se_hat);
    println!("95% CI    [{:.6}, {:.6}]", r.ci_low, r.ci_high);
    if let Some(z) = &r.selected_support {
        let names: Vec<&str> = z
            .active()
            .iter()
            .filter(|&&j| j > 0)
            .map(|&j| covariates[j - 1].as_str())
            .collect();
        println!(
            "selected  {}",
            if names.is_empty() {
                "(intercept only)".to_string()
            } else {
                names.join(", ")
            }
        );
    }
}
