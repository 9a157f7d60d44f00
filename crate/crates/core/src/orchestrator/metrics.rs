use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wall-clock milliseconds per phase. All zero in deterministic mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub local_ms: f64,
    pub distill_ms: f64,
    pub eval_ms: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    /// Client ids per group, `groups[k]` trained slot `k`.
    pub groups: Vec<Vec<usize>>,
    pub slot_accuracy: Vec<f64>,
    /// Accuracy of slot 0, the headline number.
    pub main_accuracy: f64,
    pub ensemble_accuracy: f64,
    pub ensemble_members: usize,
    /// Extra ensemble strategies, keyed by name (ensemble evaluation only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub strategy_accuracy: BTreeMap<String, f64>,
    pub distill_steps: usize,
    pub probe_kl_before: Option<f64>,
    pub probe_kl_after: Option<f64>,
    /// Teacher member forwards per distillation batch, 0 when no batch ran.
    pub teacher_forwards_per_batch: u64,
    pub teacher_forwards: u64,
    pub phase_ms: PhaseTimes,
}

/// Metrics of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub method: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

impl RunLog {
    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_record().map(|r| r.main_accuracy)
    }

    pub fn final_ensemble_accuracy(&self) -> Option<f64> {
        self.final_record().map(|r| r.ensemble_accuracy)
    }

    pub fn teacher_forwards(&self) -> u64 {
        self.records.iter().map(|r| r.teacher_forwards).sum()
    }
}

pub fn write_jsonl<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("metrics line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Per-method aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub seed_count: usize,
    pub acc_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub acc_std: f64,
    pub ensemble_acc_mean: f64,
    /// Mean total teacher member forwards per run.
    pub kd_cost_counter: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(method: &str, runs: &[RunLog]) -> Result<SummaryRow> {
    let finals: Vec<&MetricsRecord> = runs
        .iter()
        .map(|r| r.final_record().ok_or_else(|| Error::InvalidArgument(format!("run seed {} has no records", r.seed))))
        .collect::<Result<_>>()?;
    let acc: Vec<f64> = finals.iter().map(|r| r.main_accuracy).collect();
    let ens: Vec<f64> = finals.iter().map(|r| r.ensemble_accuracy).collect();
    let cost: Vec<f64> = runs.iter().map(|r| r.teacher_forwards() as f64).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    Ok(SummaryRow {
        method: method.to_string(),
        seed_count: runs.len(),
        acc_mean,
        acc_std,
        ensemble_acc_mean: mean_std(&ens).0,
        kd_cost_counter: mean_std(&cost).0,
    })
}
