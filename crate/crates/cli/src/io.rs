//! CSV and JSON artifacts.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Resolved<'a> {
    sha256: String,
    config: &'a ExperimentConfig,
}

/// Writes the fully defaulted configuration with its content hash.
pub fn write_resolved_config(out: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    write_json(
        &out.join("resolved_config.json"),
        &Resolved {
            sha256: cfg.content_hash(),
            config: cfg,
        },
    )
}

/// Design read from a weights file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub weights: Vec<f64>,
    /// The `active` column when present.
    pub active: Option<Vec<bool>>,
}

/// Reads a CSV with a `weight` column and an optional `active` column (as
/// written by `oed`), one row per candidate in order.
pub fn read_weights(path: &Path, n_sensors: usize) -> CliResult<WeightsFile> {
    let bad = |msg: String| CliError::Validation(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let wcol = col("weight").ok_or_else(|| bad("missing `weight` column".into()))?;
    let acol = col("active");
    let mut weights = Vec::new();
    let mut active = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let w: f64 = field(wcol)
            .parse()
            .map_err(|_| bad(format!("row {i}: `{}` is not a number", field(wcol))))?;
        if !(0.0..=1.0).contains(&w) {
            return Err(bad(format!("row {i}: weight {w} lies outside [0, 1]")));
        }
        weights.push(w);
        if let Some(c) = acol {
            active.push(match field(c) {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(bad(format!("row {i}: `{other}` is not a boolean"))),
            });
        }
    }
    if weights.len() != n_sensors {
        return Err(bad(format!("{} weights for {n_sensors} candidate sensors", weights.len())));
    }
    Ok(WeightsFile {
        weights,
        active: acol.map(|_| active),
    })
}
