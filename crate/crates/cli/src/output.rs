//! results.csv, manifest.json and theory.json.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Bumped whenever a column is added, removed or changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub fn schema_tag(mode: &str) -> String {
    format!("nbrw.{mode}/v{SCHEMA_VERSION}")
}

/// Canonical JSON of the resolved config (serde_json keeps struct field
/// order, so equal configs give equal bytes).
pub fn config_json(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(&config_json(cfg)).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rows with the schema and config digest columns prepended.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    schema: String,
    digest: String,
}

impl Table {
    pub fn new(cfg: &ExperimentConfig, columns: &[&str]) -> Table {
        let mut header = vec!["schema".to_string(), "config_digest".to_string()];
        header.extend(columns.iter().map(|c| c.to_string()));
        Table { header, rows: Vec::new(), schema: schema_tag(cfg.mode.name()), digest: config_digest(cfg) }
    }

    pub fn push(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len() + 2, self.header.len(), "row width does not match the header");
        let mut row = vec![self.schema.clone(), self.digest.clone()];
        row.extend(cells);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()
    }
}

pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn write_json(path: &Path, value: &Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    text.push('\n');
    fs::write(path, text)
}

/// The manifest embeds the resolved config, so passing it back as
/// `--config` reruns the experiment.
pub fn manifest(cfg: &ExperimentConfig, files: &[&str], incomplete: usize, extra: Value) -> Value {
    json!({
        "software": concat!("nbrw ", env!("CARGO_PKG_VERSION")),
        "schema": schema_tag(cfg.mode.name()),
        "config_digest": config_digest(cfg),
        "seed": cfg.seed,
        "config": config_json(cfg),
        "files": files,
        "incomplete_rows": incomplete,
        "details": extra,
    })
}
