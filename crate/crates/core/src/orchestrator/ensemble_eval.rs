//! Training without distillation while scoring several ensemble constructions
//! every round: the client models of the round ("clients") and the newest
//! `r` aggregated checkpoints of every slot ("aggregated_r{r}").

use std::sync::Mutex;

use super::config::{Datasets, EnsembleStrategy, ExperimentConfig, Method};
use super::engine::{run_engine, DistillTarget, HookCtx, Observer, RoundExtra, RoundHooks, RunOptions, RunState};
use super::eval::evaluate;
use super::feddf::client_ensemble;
use crate::aggregation::{train_group_releasing_clients, GroupJob, GroupOutcome};
use crate::distill::{build_ensemble_with_depth, CheckpointBuffer};
use crate::error::Result;
use crate::local::ClientState;
use crate::nn::ParameterVector;

/// Checkpoint depths scored every round.
pub const AGGREGATED_DEPTHS: [usize; 3] = [1, 2, 4];

pub fn strategy_key(strategy: EnsembleStrategy, depth: usize) -> String {
    match strategy {
        EnsembleStrategy::Clients => "clients".to_string(),
        EnsembleStrategy::Aggregated => format!("aggregated_r{depth}"),
    }
}

struct Releasing {
    strategy: EnsembleStrategy,
    depth: usize,
    released: Mutex<Vec<(usize, ParameterVector)>>,
    history: Option<CheckpointBuffer>,
}

impl RoundHooks for Releasing {
    fn train(&self, job: &GroupJob, members: Vec<&mut ClientState>) -> Result<GroupOutcome> {
        let (outcome, models) = train_group_releasing_clients(job, members)?;
        self.released.lock().expect("no panics while holding the lock").extend(models);
        Ok(outcome)
    }

    fn after_round(&mut self, ctx: &HookCtx, buffer: &CheckpointBuffer) -> Result<RoundExtra> {
        let mut models = std::mem::take(self.released.get_mut().expect("no panics while holding the lock"));
        models.sort_by_key(|(id, _)| *id);
        // deeper history than the run's own buffer keeps
        let history = match &mut self.history {
            Some(h) => {
                for k in 0..buffer.models() {
                    h.push(k, buffer.ring(k)[0].clone())?;
                }
                &*h
            }
            None => buffer,
        };
        let mut extra = RoundExtra::default();
        let clients = client_ensemble(&models)?;
        let clients_acc = evaluate(ctx.spec, &clients, ctx.test)?;
        extra.strategies.insert(strategy_key(EnsembleStrategy::Clients, 0), clients_acc);
        for depth in AGGREGATED_DEPTHS {
            let ens = build_ensemble_with_depth(history, depth)?;
            extra.strategies.insert(strategy_key(EnsembleStrategy::Aggregated, depth), evaluate(ctx.spec, &ens, ctx.test)?);
        }
        extra.ensemble = Some(match self.strategy {
            EnsembleStrategy::Clients => (clients_acc, clients.len()),
            EnsembleStrategy::Aggregated => {
                let ens = build_ensemble_with_depth(history, self.depth)?;
                (evaluate(ctx.spec, &ens, ctx.test)?, ens.len())
            }
        });
        Ok(extra)
    }
}

pub fn run_ensemble_eval(cfg: &ExperimentConfig, data: &Datasets, strategy: EnsembleStrategy, opts: RunOptions) -> Result<RunState> {
    let cfg = ExperimentConfig { method: Method::EnsembleEval, ensemble_strategy: strategy, ..cfg.clone() };
    run_ensemble_eval_observed(&cfg, data, opts, None)
}

pub(crate) fn run_ensemble_eval_observed(
    cfg: &ExperimentConfig,
    data: &Datasets,
    opts: RunOptions,
    observer: Option<Observer>,
) -> Result<RunState> {
    let max_depth = AGGREGATED_DEPTHS.into_iter().max().unwrap_or(1);
    let history = if cfg.checkpoints < max_depth {
        let dim = cfg.network()?.param_count();
        Some(CheckpointBuffer::new(cfg.models(), max_depth, dim)?)
    } else {
        None
    };
    let mut hooks = Releasing {
        strategy: cfg.ensemble_strategy,
        depth: cfg.checkpoints,
        released: Mutex::new(Vec::new()),
        history,
    };
    run_engine(cfg, data, opts, DistillTarget::Nothing, &mut hooks, observer)
}
