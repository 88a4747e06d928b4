//! Metrics CSV and the text table rendered from it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use sparse_ps::simulation::{MetricsRow, OutcomeModel, ScenarioConfig};
use sparse_ps::Method;

use crate::{CliError, ReportArgs};

pub const METRICS_FILE: &str = "metrics.csv";

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub model: OutcomeModel,
    pub rho: f64,
    pub p: usize,
    pub n: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub method: Method,
    pub rbias: Option<f64>,
    pub se: Option<f64>,
    pub mean_se_hat: Option<f64>,
    pub cp: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub n_converged: usize,
    pub n_failed: usize,
    pub mc_se_of_cp: Option<f64>,
}

impl MetricsRecord {
    pub fn new(cfg: &ScenarioConfig, row: &MetricsRow) -> Self {
        Self {
            scenario: row.scenario.clone(),
            model: cfg.model,
            rho: cfg.rho,
            p: cfg.p,
            n: cfg.n,
            b: cfg.b,
            method: row.method,
            rbias: row.rbias,
            se: row.se,
            mean_se_hat: row.mean_se_hat,
            cp: row.cp,
            tpr: row.tpr,
            tnr: row.tnr,
            n_converged: row.n_converged,
            n_failed: row.n_failed,
            mc_se_of_cp: row.mc_se_of_cp,
        }
    }
}

pub fn write_metrics_csv(cfg: &ScenarioConfig, rows: &[MetricsRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(MetricsRecord::new(cfg, row))
            .map_err(|e| CliError::user(anyhow!(e)))?;
    }
    w.into_inner()
        .map_err(|e| CliError::user(anyhow!(e.to_string())))
}

pub fn read_metrics_csv(path: &Path) -> anyhow::Result<Vec<MetricsRecord>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<MetricsRecord>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

/// `metrics.csv` in `dir` itself, else in its immediate subdirectories.
pub fn find_metrics(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let top = dir.join(METRICS_FILE);
    if top.is_file() {
        return Ok(vec![top]);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join(METRICS_FILE))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        bail!("no {METRICS_FILE} under {}", dir.display());
    }
    Ok(found)
}

fn cell(v: Option<f64>, scale: f64, decimals: usize) -> String {
    v.map_or_else(
        || "-".to_string(),
        |x| format!("{:.*}", decimals, x * scale),
    )
}

/// Aligned table grouped by model, `rho`, `p` and method, with bias, SE,
/// mean estimated SE and coverage scaled by 100.
pub fn render_table(records: &[MetricsRecord]) -> String {
    let mut rows: Vec<&MetricsRecord> = records.iter().collect();
    rows.sort_by(|a, b| {
        (a.model as u8)
            .cmp(&(b.model as u8))
            .then(a.rho.total_cmp(&b.rho))
            .then((a.p, a.n, a.method).cmp(&(b.p, b.n, b.method)))
    });

    let header = [
        "model", "rho", "p", "n", "method", "Rbias", "S.E.", "E[S.E.]", "CP", "TPR", "TNR",
        "failed",
    ];
    let body: Vec<[String; 12]> = rows
        .iter()
        .map(|r| {
            [
                r.model.to_string(),
                format!("{}", r.rho),
                r.p.to_string(),
                r.n.to_string(),
                r.method.to_string(),
                cell(r.rbias, 100.0, 2),
                cell(r.se, 100.0, 2),
                cell(r.mean_se_hat, 100.0, 2),
                cell(r.cp, 100.0, 1),
                cell(r.tpr, 1.0, 2),
                cell(r.tnr, 1.0, 2),
                format!("{}/{}", r.n_failed, r.n_failed + r.n_converged),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for line in &body {
        for (w, c) in width.iter_mut().zip(line) {
            *w = (*w).max(c.len());
        }
    }

    let mut s = String::new();
    let fmt_line = |s: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(width)
            .enumerate()
            .map(|(k, (c, w))| {
                if k == 0 || k == 4 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    fmt_line(&mut s, &header);
    let mut prev: Option<(OutcomeModel, u64, usize, usize)> = None;
    for (r, line) in rows.iter().zip(&body) {
        let key = (r.model, r.rho.to_bits(), r.p, r.n);
        if prev.is_some_and(|p| p != key) {
            s.push('\n');
        }
        prev = Some(key);
        let cells: Vec<&str> = line.iter().map(String::as_str).collect();
        fmt_line(&mut s, &cells);
    }
    s
}

pub fn run(args: ReportArgs) -> u8 {
    match report(&args.results) {
        Ok(table) => {
            print!("{table}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn report(dir: &Path) -> anyhow::Result<String> {
    let mut records = Vec::new();
    for path in find_metrics(dir)? {
        records.extend(read_metrics_csv(&path)?);
    }
    if records.is_empty() {
        bail!("no metrics rows under {}", dir.display());
    }
    Ok(render_table(&records))
}
