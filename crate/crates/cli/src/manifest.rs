use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Audit record written next to every run's outputs, including failed runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub overrides: Vec<String>,
    pub outputs: Vec<PathBuf>,
    pub exit_code: u8,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: None,
            overrides: Vec::new(),
            outputs: Vec::new(),
            exit_code: 0,
            error: None,
        }
    }

    /// Writes `contents` to `out/name` and records the path.
    pub fn write_output(
        &mut self,
        out: &Path,
        name: &str,
        contents: &[u8],
    ) -> Result<(), CliError> {
        let path = out.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::user(anyhow::anyhow!("writing {}: {e}", path.display())))?;
        self.outputs.push(path);
        Ok(())
    }

    /// Stamps the outcome, writes the manifest and returns the exit code.
    /// A manifest that cannot be written is reported on stderr.
    pub fn finish(mut self, out: &Path, outcome: Result<u8, CliError>) -> u8 {
        let code = match outcome {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {:#}", e.error);
                self.error = Some(format!("{:#}", e.error));
                e.code
            }
        };
        self.exit_code = code;
        self.finished_at = Some(now());
        let path = out.join(MANIFEST_FILE);
        self.outputs.push(path.clone());
        let written = std::fs::create_dir_all(out).and_then(|_| {
            let mut json = serde_json::to_vec_pretty(&self).expect("manifest serializes");
            json.push(b'\n');
            std::fs::write(&path, json)
        });
        if let Err(e) = written {
            eprintln!("error: writing {}: {e}", path.display());
        }
        code
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
