//! TOML configuration with `--set key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Reads and parses `path`; the error carries the file name and, for
/// syntax and type errors, the line.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, sets: &[String]) -> anyhow::Result<T> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let name = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    let mut table: Table = toml::from_str(&text).map_err(|e| anyhow!("{name}: {e}"))?;
    if sets.is_empty() {
        // straight from the text so type errors keep their line numbers
        return toml::from_str(&text).map_err(|e| anyhow!("{name}: {e}"));
    }
    for set in sets {
        apply_override(&mut table, set)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("{name} with overrides: {e}"))
}

/// Applies one `key=value` pair. The value is read as a TOML value and
/// falls back to a bare string, so `model=M2` and `rho=0.5` both work.
pub fn apply_override(table: &mut Table, set: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = set.split_once('=') else {
        bail!("override `{set}` is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|k| k.is_empty()) {
        bail!("override `{set}` has an empty key");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("nonempty");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{set}`: `{k}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
