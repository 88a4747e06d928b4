//! CSV ingestion of user data and CSV dumps of posterior draws.
//!
//! Input files have a header row with a `y` column, a `delta` column (0/1) and
//! any number of covariate columns; an intercept is prepended. `y` must be
//! empty on rows with `delta = 0`. Row numbers in errors are file line numbers.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::bsps::PosteriorSample;
use crate::error::{Error, Result};
use crate::model::Dataset;

/// Parsed input with its covariate names.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub covariates: Vec<String>,
}

fn csv_error(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Csv {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

pub fn read_dataset_csv<R: Read>(reader: R) -> Result<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_error(1, "", e.to_string()))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = find("y").ok_or_else(|| csv_error(1, "y", "missing column"))?;
    let d_col = find("delta").ok_or_else(|| csv_error(1, "delta", "missing column"))?;
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|&k| k != y_col && k != d_col)
        .collect();
    let covariates: Vec<String> = cov_cols.iter().map(|&k| headers[k].to_string()).collect();

    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut delta = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| {
            let line = e.position().map_or(line, |p| p.line() as usize);
            csv_error(line, "", e.to_string())
        })?;
        let d = match &record[d_col] {
            "0" => false,
            "1" => true,
            other => {
                return Err(csv_error(
                    line,
                    "delta",
                    format!("expected 0 or 1, got `{other}`"),
                ))
            }
        };
        let raw_y = &record[y_col];
        let yi = match (d, raw_y.is_empty()) {
            (false, true) => None,
            (false, false) => {
                return Err(csv_error(line, "y", "outcome must be empty when delta = 0"))
            }
            (true, true) => return Err(csv_error(line, "y", "outcome missing for a respondent")),
            (true, false) => Some(
                parse_finite(raw_y)
                    .ok_or_else(|| csv_error(line, "y", format!("not a number: `{raw_y}`")))?,
            ),
        };
        for (&c, name) in cov_cols.iter().zip(&covariates) {
            let raw = &record[c];
            values.push(
                parse_finite(raw)
                    .ok_or_else(|| csv_error(line, name, format!("not a number: `{raw}`")))?,
            );
        }
        y.push(yi);
        delta.push(d);
    }
    let n = y.len();
    if n == 0 {
        return Err(csv_error(2, "", "no data rows"));
    }
    let cov = DMatrix::from_row_slice(n, cov_cols.len(), &values);
    let dataset = Dataset::with_intercept(&cov, y, delta)?;
    Ok(LoadedData {
        dataset,
        covariates,
    })
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_dataset_csv(path: &Path) -> Result<LoadedData> {
    read_dataset_csv(std::fs::File::open(path)?)
}

/// Writes `data` in the ingestion format with covariates named `x1..xp`.
pub fn write_dataset_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = data.dim() - 1;
    let mut header = vec!["y".to_string(), "delta".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(io_err)?;
    for i in 0..data.n() {
        let mut rec = vec![
            data.y(i).map(|v| v.to_string()).unwrap_or_default(),
            (data.responded(i) as u8).to_string(),
        ];
        rec.extend((1..=p).map(|j| data.x()[(i, j)].to_string()));
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One row per kept draw: `iteration, theta, phi_*, z_*`, followed by
/// `u_*, beta_*, sigma2_e` when the draws carry a working model.
pub fn write_chain_csv<W: Write>(sample: &PosteriorSample, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = sample.draws.first() else {
        w.flush()?;
        return Ok(());
    };
    let d = first.phi.len();
    let working = first.working.is_some();
    let mut header = vec!["iteration".to_string(), "theta".to_string()];
    header.extend((0..d).map(|j| format!("phi_{j}")));
    header.extend((0..d).map(|j| format!("z_{j}")));
    if working {
        header.extend((0..d).map(|j| format!("u_{j}")));
        header.extend((0..d).map(|j| format!("beta_{j}")));
        header.push("sigma2_e".into());
    }
    w.write_record(&header).map_err(io_err)?;
    for (k, s) in sample.draws.iter().enumerate() {
        let mut rec = vec![(sample.burn_in + k).to_string(), s.theta.to_string()];
        rec.extend(s.phi.as_vector().iter().map(|v| v.to_string()));
        rec.extend(s.z.as_slice().iter().map(|&b| (b as u8).to_string()));
        if let Some(wm) = &s.working {
            rec.extend(wm.u.as_slice().iter().map(|&b| (b as u8).to_string()));
            rec.extend(wm.beta.iter().map(|v| v.to_string()));
            rec.push(wm.sigma2_e.to_string());
        }
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}
