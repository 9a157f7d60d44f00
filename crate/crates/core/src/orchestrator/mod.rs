//! Full training loops, their configuration and the metrics they emit.

pub mod config;
mod engine;
mod ensemble_eval;
pub mod eval;
mod feddf;
pub mod metrics;

pub use config::{prepare_datasets, DataConfig, Datasets, EnsembleStrategy, ExperimentConfig, FedDfConfig, Method, ModelConfig};
pub use engine::{
    run, run_ablation, run_fedavg, run_fedprox, run_fedsdd, run_observed, run_scaffold, AblationVariant, Observer,
    RoundSnapshot, RunOptions, RunState,
};
pub use ensemble_eval::{run_ensemble_eval, strategy_key, AGGREGATED_DEPTHS};
pub use eval::{evaluate, predict, Predictor};
pub use feddf::{client_ensemble, drop_worst, run_feddf};
pub use metrics::{mean_std, read_jsonl, summarize, write_jsonl, MetricsRecord, PhaseTimes, RunLog, SummaryRow};
