use std::path::Path;

use anyhow::{bail, Context, Result};
use fedsdd_core::orchestrator::ExperimentConfig;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Distinguishes a missing config file from other failures so `main` can
/// pick the exit code.
#[derive(Debug)]
pub struct ConfigNotFound(pub String);

impl std::fmt::Display for ConfigNotFound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config not found: {}", self.0)
    }
}

impl std::error::Error for ConfigNotFound {}

pub fn read_table(path: &Path) -> Result<Table> {
    if !path.is_file() {
        return Err(ConfigNotFound(path.display().to_string()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<Table>().with_context(|| format!("parsing {}", path.display()))
}

/// `key=value` with a dotted key; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not key=value");
    };
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn load_experiment(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = read_table(path)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig =
        Value::Table(table).try_into().with_context(|| format!("invalid config {}", path.display()))?;
    cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

/// SHA-256 of the canonical JSON form: object keys sorted, every field
/// present. Independent of key order and of defaulted-versus-spelled-out
/// fields in the source file.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_value(cfg)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}
