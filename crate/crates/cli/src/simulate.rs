use std::str::FromStr;

use anyhow::anyhow;
use serde::Serialize;
use sparse_ps::simulation::{run_monte_carlo_with_workers, MonteCarloOutput, ScenarioConfig};
use sparse_ps::{EstimateReport, Method};

use crate::manifest::RunManifest;
use crate::report::{write_metrics_csv, METRICS_FILE};
use crate::{config, CliError, SimulateArgs};

pub const REPLICATIONS_FILE: &str = "replications.json";
pub const CONFIG_FILE: &str = "config.toml";

pub fn run(args: SimulateArgs) -> u8 {
    let mut manifest = RunManifest::start("simulate", args.run.config.as_deref());
    manifest.overrides = echo_overrides(&args);
    let out = args.run.out.clone();
    let outcome = simulate(&args, &mut manifest);
    manifest.finish(&out, outcome)
}

/// Every command-line change to the configuration, in a fixed order.
fn echo_overrides(args: &SimulateArgs) -> Vec<String> {
    let mut v = args.run.sets.clone();
    if let Some(s) = args.run.seed {
        v.push(format!("seed={s}"));
    }
    if let Some(m) = &args.methods {
        v.push(format!("methods={m}"));
    }
    if let Some(b) = args.run.burn_in {
        v.push(format!("burn_in={b}"));
    }
    if let Some(k) = args.run.kept {
        v.push(format!("kept={k}"));
    }
    v
}

pub fn resolve_config(args: &SimulateArgs) -> Result<ScenarioConfig, CliError> {
    let mut cfg: ScenarioConfig = config::load(args.run.config.as_deref(), &args.run.sets)?;
    if let Some(s) = args.run.seed {
        cfg.seed = s;
    }
    if let Some(m) = &args.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(b) = args.run.burn_in {
        cfg.bsps.burn_in = b;
        cfg.obsps.burn_in = b;
    }
    if let Some(k) = args.run.kept {
        cfg.bsps.kept = k;
        cfg.obsps.kept = k;
    }
    cfg.validate().map_err(CliError::user)?;
    Ok(cfg)
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>, CliError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| Method::from_str(s).map_err(CliError::user))
        .collect()
}

fn simulate(args: &SimulateArgs, manifest: &mut RunManifest) -> Result<u8, CliError> {
    let cfg = resolve_config(args)?;
    manifest.seed = Some(cfg.seed);
    let out = &args.run.out;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::user(anyhow!("creating {}: {e}", out.display())))?;

    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_monte_carlo_with_workers(&cfg, workers).map_err(CliError::compute)?;

    let resolved = toml::to_string(&cfg).map_err(|e| CliError::user(anyhow!(e)))?;
    manifest.write_output(out, CONFIG_FILE, resolved.as_bytes())?;
    manifest.write_output(out, METRICS_FILE, &write_metrics_csv(&cfg, &result.rows)?)?;
    manifest.write_output(out, REPLICATIONS_FILE, &replications_json(&result))?;

    for row in &result.rows {
        if row.n_failed > 0 {
            eprintln!(
                "{}: {} of {} replications failed",
                row.method, row.n_failed, cfg.b
            );
        }
    }
    Ok(if result.any_failures() { 2 } else { 0 })
}

#[derive(Serialize)]
struct ReplicationLine<'a> {
    method: Method,
    replication: u64,
    report: &'a EstimateReport,
}

fn replications_json(result: &MonteCarloOutput) -> Vec<u8> {
    let lines: Vec<ReplicationLine> = result
        .replications
        .iter()
        .flat_map(|(m, recs)| {
            recs.iter().map(move |r| ReplicationLine {
                method: *m,
                replication: r.replication,
                report: &r.report,
            })
        })
        .collect();
    let mut buf = serde_json::to_vec_pretty(&lines).expect("reports serialize");
    buf.push(b'\n');
    buf
}
