//! FedDF: one global model, distilled each round from the logit average of
//! the round's client models, starting from their FedAvg aggregate.

use super::config::{Datasets, ExperimentConfig, Method};
use super::engine::{initial_control, initial_weights, plan_round, update_control, RunOptions, RunState, Timer};
use super::eval::evaluate;
use super::metrics::{MetricsRecord, PhaseTimes, RunLog};
use crate::aggregation::{select_clients, train_group_releasing_clients, GroupJob};
use crate::distill::{distill_monitored, CheckpointBuffer, EnsembleMember, EnsembleSpec, Monitor};
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParameterVector};
use crate::data::LabeledDataset;
use crate::seed::derive_seed;

/// Uniform ensemble of client models, `slot` holding the client id.
pub fn client_ensemble(models: &[(usize, ParameterVector)]) -> Result<EnsembleSpec> {
    EnsembleSpec::uniform(
        models.iter().map(|(id, w)| EnsembleMember { slot: *id, age: 0, weights: w.clone() }).collect(),
    )
}

/// Removes the model with the lowest validation accuracy (the lowest client
/// id among ties). A single model is kept.
pub fn drop_worst(
    spec: &NetworkSpec,
    mut models: Vec<(usize, ParameterVector)>,
    validation: &LabeledDataset,
) -> Result<Vec<(usize, ParameterVector)>> {
    if models.len() < 2 {
        return Ok(models);
    }
    let mut worst = 0;
    let mut worst_acc = f64::INFINITY;
    for (i, (_, w)) in models.iter().enumerate() {
        let acc = evaluate(spec, w, validation)?;
        if acc < worst_acc {
            worst = i;
            worst_acc = acc;
        }
    }
    models.remove(worst);
    Ok(models)
}

pub fn run_feddf(
    cfg: &ExperimentConfig,
    data: &Datasets,
    drop_worst_models: bool,
    early_stop: bool,
    opts: RunOptions,
) -> Result<RunState> {
    let cfg = &ExperimentConfig { method: Method::FedDf, ..cfg.clone() };
    cfg.validate()?;
    let validation = match (&data.validation, drop_worst_models || early_stop) {
        (Some(v), true) => Some(v),
        (None, true) => {
            return Err(Error::InvalidArgument("drop-worst and early stopping need a validation split".into()))
        }
        (_, false) => None,
    };
    let spec = cfg.network()?;
    let local = cfg.local_config();
    let dim = spec.param_count();
    let mut clients = data.clients()?;
    let mut global = initial_weights(cfg, &spec, 1).remove(0);
    let mut buffer = CheckpointBuffer::new(1, cfg.checkpoints, dim)?;
    let mut control = initial_control(&local, dim);
    let mut records = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let timer = Timer::start(opts.record_wall_clock);
        let plan = plan_round(cfg, 1, t).map_err(|e| e.in_round(t, "plan"))?;
        let job = GroupJob {
            spec: &spec,
            init: &global,
            local: &local,
            server_control: control.as_ref(),
            seed: derive_seed(cfg.seed, "local", &[t as u64]),
            parallel: opts.parallel,
        };
        let (outcome, models) = train_group_releasing_clients(&job, select_clients(&mut clients, &plan.groups[0]))
            .map_err(|e| e.in_round(t, "local"))?;
        let local_ms = timer.ms();
        let student = outcome.aggregate.weights.clone();
        update_control(&mut control, std::slice::from_ref(&outcome), cfg.total_clients);
        buffer.push(0, student.clone()).map_err(|e| e.in_round(t, "checkpoint"))?;

        let timer = Timer::start(opts.record_wall_clock);
        let teacher_models = match validation.filter(|_| drop_worst_models) {
            Some(v) => drop_worst(&spec, models, v).map_err(|e| e.in_round(t, "ensemble"))?,
            None => models,
        };
        let teacher = client_ensemble(&teacher_models).map_err(|e| e.in_round(t, "ensemble"))?;
        let seed = derive_seed(cfg.seed, "distill", &[t as u64, 0]);
        let (weights, report) = match validation.filter(|_| early_stop) {
            Some(v) => {
                let mut best = (evaluate(&spec, &student, v)?, student.clone());
                let mut stale = 0;
                let mut check = |_step: usize, w: &ParameterVector| -> Result<bool> {
                    let acc = evaluate(&spec, w, v)?;
                    if acc > best.0 {
                        best = (acc, w.clone());
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                    Ok(stale >= cfg.feddf.patience)
                };
                let monitor = Monitor { interval: cfg.feddf.eval_interval, on_check: &mut check };
                let report = distill_monitored(&spec, &student, &teacher, &data.pool, &cfg.distill, seed, Some(monitor))
                    .map_err(|e| e.in_round(t, "distill"))?;
                let final_acc = evaluate(&spec, &report.weights, v)?;
                let weights = if final_acc > best.0 { report.weights.clone() } else { best.1 };
                (weights, report)
            }
            None => {
                let report = distill_monitored(&spec, &student, &teacher, &data.pool, &cfg.distill, seed, None)
                    .map_err(|e| e.in_round(t, "distill"))?;
                (report.weights.clone(), report)
            }
        };
        global = weights;
        if cfg.checkpoint_distilled_main {
            buffer.replace_newest(0, global.clone()).map_err(|e| e.in_round(t, "checkpoint"))?;
        }
        let distill_ms = timer.ms();

        let timer = Timer::start(opts.record_wall_clock);
        let main_accuracy = evaluate(&spec, &global, &data.test).map_err(|e| e.in_round(t, "eval"))?;
        let ensemble_accuracy = evaluate(&spec, &teacher, &data.test).map_err(|e| e.in_round(t, "eval"))?;
        let eval_ms = timer.ms();
        let ran = report.steps_run > 0;
        records.push(MetricsRecord {
            round: t,
            groups: plan.groups.clone(),
            slot_accuracy: vec![main_accuracy],
            main_accuracy,
            ensemble_accuracy,
            ensemble_members: teacher.len(),
            strategy_accuracy: Default::default(),
            distill_steps: report.steps_run,
            probe_kl_before: report.probe_kl_before,
            probe_kl_after: report.probe_kl_after,
            teacher_forwards_per_batch: if ran { report.teacher_forwards_per_batch } else { 0 },
            teacher_forwards: report.teacher_forwards,
            phase_ms: PhaseTimes { local_ms, distill_ms, eval_ms },
        });
    }

    Ok(RunState {
        config: cfg.clone(),
        global_weights: vec![global],
        checkpoints: buffer,
        clients,
        server_control: control,
        log: RunLog { method: cfg.method.name().to_string(), seed: cfg.seed, records },
    })
}
