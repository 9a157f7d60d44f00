use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedsdd_core::orchestrator::{prepare_datasets, run, summarize, write_jsonl, ExperimentConfig, Method, RunLog, RunOptions, SummaryRow};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, to_toml};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub method: String,
    pub seed: u64,
    /// Relative to the output directory.
    pub path: PathBuf,
    pub partition_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub metrics_files: Vec<MetricsFile>,
    pub summary_path: PathBuf,
}

pub struct Outcome {
    pub manifest: RunManifest,
    pub summary: Vec<SummaryRow>,
}

fn metrics_path(methods: &[Method], method: Method, seed: u64) -> PathBuf {
    if methods.len() == 1 {
        PathBuf::from(format!("seed_{seed}.jsonl"))
    } else {
        PathBuf::from(method.name()).join(format!("seed_{seed}.jsonl"))
    }
}

/// Runs every method for every seed, sharing the dataset and partition per
/// seed, and writes metrics, summary, config copy and manifest to `out`.
pub fn execute(cfg: &ExperimentConfig, methods: &[Method], seeds: &[u64], out: &Path, deterministic: bool) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), to_toml(cfg)?)?;
    let opts = if deterministic { RunOptions::deterministic() } else { RunOptions::default() };
    let mut logs: Vec<Vec<RunLog>> = vec![Vec::new(); methods.len()];
    let mut files = Vec::new();
    for &seed in seeds {
        let seeded = ExperimentConfig { seed, ..cfg.clone() };
        let data = prepare_datasets(&seeded).with_context(|| format!("preparing data for seed {seed}"))?;
        let checksum = format!("{:016x}", data.partition.checksum());
        for (i, &method) in methods.iter().enumerate() {
            let run_cfg = ExperimentConfig { method, ..seeded.clone() };
            let state = run(&run_cfg, &data, opts).with_context(|| format!("{method}, seed {seed}"))?;
            let rel = metrics_path(methods, method, seed);
            let path = out.join(&rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_jsonl(&state.log.records, BufWriter::new(File::create(&path)?))?;
            files.push(MetricsFile { method: method.name().into(), seed, path: rel, partition_checksum: checksum.clone() });
            logs[i].push(state.log);
        }
    }
    let summary = methods
        .iter()
        .zip(&logs)
        .map(|(m, l)| summarize(m.name(), l))
        .collect::<fedsdd_core::Result<Vec<_>>>()?;
    write_summary(&summary, &out.join(SUMMARY_FILE))?;
    let manifest = RunManifest {
        config_hash: config_hash(cfg)?,
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        seeds: seeds.to_vec(),
        deterministic,
        output_dir: out.to_path_buf(),
        metrics_files: files,
        summary_path: PathBuf::from(SUMMARY_FILE),
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(Outcome { manifest, summary })
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<20} {:>5} {:>16} {:>10} {:>14}\n",
        "method", "seeds", "accuracy", "ensemble", "kd forwards"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>5} {:>8.4} ± {:<6.4} {:>10.4} {:>14.0}\n",
            r.method, r.seed_count, r.acc_mean, r.acc_std, r.ensemble_acc_mean, r.kd_cost_counter
        ));
    }
    if let Some(base) = rows.first() {
        for r in &rows[1..] {
            s.push_str(&format!("{} - {}: {:+.4}\n", r.method, base.method, r.acc_mean - base.acc_mean));
        }
    }
    s
}
