use anyhow::anyhow;
use sparse_ps::io::write_dataset_csv;
use sparse_ps::simulation::{generate_replication, ScenarioConfig};

use crate::manifest::RunManifest;
use crate::{config, CliError, GenerateArgs};

pub const DATA_FILE: &str = "data.csv";
/// True outcome values, including those masked in `data.csv`.
pub const FULL_FILE: &str = "y_full.csv";

pub fn run(args: GenerateArgs) -> u8 {
    let mut manifest = RunManifest::start("generate", args.run.config.as_deref());
    manifest.overrides = args.run.sets.clone();
    let out = args.run.out.clone();
    let outcome = generate(&args, &mut manifest);
    manifest.finish(&out, outcome)
}

fn generate(args: &GenerateArgs, manifest: &mut RunManifest) -> Result<u8, CliError> {
    let mut cfg: ScenarioConfig = config::load(args.run.config.as_deref(), &args.run.sets)?;
    if let Some(s) = args.run.seed {
        cfg.seed = s;
    }
    manifest.seed = Some(cfg.seed);
    cfg.validate().map_err(CliError::user)?;
    let out = &args.run.out;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::user(anyhow!("creating {}: {e}", out.display())))?;

    let sim = generate_replication(&cfg, args.replication).map_err(CliError::compute)?;
    let mut buf = Vec::new();
    write_dataset_csv(&sim.dataset, &mut buf).map_err(CliError::user)?;
    manifest.write_output(out, DATA_FILE, &buf)?;
    let full: String = std::iter::once("y".to_string())
        .chain(sim.y_full.iter().map(|v| v.to_string()))
        .collect::<Vec<_>>()
        .join("\n");
    manifest.write_output(out, FULL_FILE, format!("{full}\n").as_bytes())?;
    Ok(0)
}
