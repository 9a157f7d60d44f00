use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use fedsdd_core::orchestrator::{prepare_datasets, ExperimentConfig, Method};

mod config;
mod runner;
mod schedsim;

use config::{load_experiment, ConfigNotFound};

#[derive(Parser)]
#[command(name = "fedsdd", version, about = "Federated learning simulator with ensemble distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Override a config value, e.g. `--set distill.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method for every seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fedsdd-out")]
        out: PathBuf,
        /// Serial execution and zeroed wall-clock fields.
        #[arg(long)]
        deterministic: bool,
    },
    /// Run several methods on shared seeds and print a comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long, default_value = "fedsdd-out")]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Compare sequential and FedSDD round scheduling on an availability trace.
    Schedsim {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the Gantt CSVs.
        #[arg(long, default_value = "schedsim-out")]
        out: PathBuf,
    },
    /// Per-client class counts of the configured partition.
    PartitionStats {
        #[command(flatten)]
        common: Common,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn seeds(common: &Common, cfg: &ExperimentConfig) -> Vec<u64> {
    if common.seed.is_empty() {
        vec![cfg.seed]
    } else {
        common.seed.clone()
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { common, out, deterministic } => {
            let cfg = load_experiment(&common.config, &common.overrides)?;
            let outcome = runner::execute(&cfg, &[cfg.method], &seeds(&common, &cfg), &out, deterministic)?;
            print!("{}", runner::format_table(&outcome.summary));
            println!("wrote {} ({} metrics files)", out.display(), outcome.manifest.metrics_files.len());
        }
        Command::Compare { common, methods, out, deterministic } => {
            let cfg = load_experiment(&common.config, &common.overrides)?;
            let methods = methods.iter().map(|m| m.parse()).collect::<fedsdd_core::Result<Vec<Method>>>()?;
            if methods.is_empty() {
                bail!("--methods is empty");
            }
            let outcome = runner::execute(&cfg, &methods, &seeds(&common, &cfg), &out, deterministic)?;
            print!("{}", runner::format_table(&outcome.summary));
            println!("wrote {} ({} metrics files)", out.display(), outcome.manifest.metrics_files.len());
        }
        Command::Schedsim { config, out } => {
            let (cfg, trace) = schedsim::load(&config)?;
            let report = schedsim::simulate(&cfg, &trace)?;
            schedsim::write_gantt(&report, &out)?;
            print!("{}", schedsim::describe(&report));
        }
        Command::PartitionStats { common, out } => {
            let cfg = load_experiment(&common.config, &common.overrides)?;
            for seed in seeds(&common, &cfg) {
                let data = prepare_datasets(&ExperimentConfig { seed, ..cfg.clone() })?;
                let part = &data.partition;
                eprintln!(
                    "seed {seed}: {} clients, alpha {}, mean TV distance {:.4}, checksum {:016x}",
                    part.n_clients(),
                    part.alpha,
                    part.mean_tv_distance(&data.train),
                    part.checksum()
                );
                match &out {
                    Some(path) => {
                        let path = if common.seed.len() > 1 { path.with_extension(format!("seed{seed}.csv")) } else { path.clone() };
                        part.write_stats_csv(&data.train, BufWriter::new(File::create(&path)?))?;
                    }
                    None => part.write_stats_csv(&data.train, io::stdout().lock())?,
                }
            }
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigNotFound>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
