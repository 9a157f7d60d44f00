use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fedsdd_core::sched::{simulate_fedsdd_parallel, simulate_sequential, AvailabilityTrace, CostModel, Schedule, Workload};
use serde::Deserialize;

use crate::config::read_table;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedConfig {
    pub rounds: usize,
    pub models: usize,
    /// Inline trace text.
    pub trace: Option<String>,
    /// Trace file, relative to the config file.
    pub trace_file: Option<PathBuf>,
    /// Clients per model, fixed across rounds. Defaults to client `c`
    /// training model `c % models`.
    pub groups: Option<Vec<Vec<usize>>>,
    pub cost: CostModel,
}

pub struct Report {
    pub sequential: Schedule,
    pub parallel: Schedule,
}

impl Report {
    pub fn ratio(&self) -> f64 {
        self.sequential.makespan as f64 / self.parallel.makespan as f64
    }
}

pub fn load(path: &Path) -> Result<(SchedConfig, AvailabilityTrace)> {
    let table = read_table(path)?;
    let cfg: SchedConfig = toml::Value::Table(table).try_into().with_context(|| format!("invalid config {}", path.display()))?;
    let (text, source) = match (&cfg.trace, &cfg.trace_file) {
        (Some(t), None) => (t.clone(), "inline trace".to_string()),
        (None, Some(f)) => {
            let full = path.parent().unwrap_or(Path::new(".")).join(f);
            let text = std::fs::read_to_string(&full).with_context(|| format!("reading trace {}", full.display()))?;
            (text, full.display().to_string())
        }
        _ => bail!("exactly one of `trace` and `trace_file` must be set"),
    };
    let trace = AvailabilityTrace::parse(&text).map_err(|e| anyhow!("malformed trace ({source}) at {e}"))?;
    Ok((cfg, trace))
}

pub fn simulate(cfg: &SchedConfig, trace: &AvailabilityTrace) -> Result<Report> {
    let groups = match &cfg.groups {
        Some(g) => g.clone(),
        None => {
            let mut g = vec![Vec::new(); cfg.models];
            for c in 0..trace.clients() {
                g[c % cfg.models].push(c);
            }
            g
        }
    };
    let work = Workload::fixed(cfg.rounds, groups)?;
    let sequential = simulate_sequential(&work, trace, &cfg.cost)?;
    let parallel = simulate_fedsdd_parallel(&work, trace, &cfg.cost)?;
    Ok(Report { sequential, parallel })
}

pub fn write_gantt(report: &Report, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for (name, s) in [("gantt_sequential.csv", &report.sequential), ("gantt_parallel.csv", &report.parallel)] {
        s.write_csv(BufWriter::new(File::create(out.join(name))?))?;
    }
    Ok(())
}

pub fn describe(report: &Report) -> String {
    let line = |name: &str, s: &Schedule| {
        format!(
            "{name:<11} makespan {:>6}  steady-state round time {:>4}  round times {:?}\n",
            s.makespan,
            s.steady_state_round_time(),
            s.round_times
        )
    };
    format!(
        "{}{}ratio (sequential / parallel makespan): {:.4}\n",
        line("sequential", &report.sequential),
        line("parallel", &report.parallel),
        report.ratio()
    )
}
