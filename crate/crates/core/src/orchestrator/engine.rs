//! The K-model round loop behind FedSDD, the single-model baselines, the
//! distillation ablations and ensemble evaluation.
//!
//! Per round: sample and group participants, train each group from its slot's
//! weights, average within groups, record the aggregates as checkpoints, build
//! the temporal-ensemble teacher and distill the selected slots. In parallel
//! mode the main-model distillation of round `t` overlaps with round `t + 1`
//! local training of groups `k >= 1`, whose inputs do not depend on it.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{Datasets, ExperimentConfig, Method};
use super::eval::evaluate;
use super::metrics::{MetricsRecord, PhaseTimes, RunLog};
use crate::aggregation::{assign_groups, sample_participants, select_groups, train_group, GroupJob, GroupOutcome, RoundPlan};
use crate::data::LabeledDataset;
use crate::distill::{build_ensemble, distill, CheckpointBuffer, DistillReport, EnsembleSpec};
use crate::error::Result;
use crate::local::{ClientState, LocalConfig, TrainerKind};
use crate::nn::{init_weights, NetworkSpec, ParameterVector};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Run clients, groups and the pipelined distillation concurrently.
    /// Results are identical either way.
    pub parallel: bool,
    pub record_wall_clock: bool,
}

impl RunOptions {
    /// Serial execution in algorithm order, no wall-clock fields.
    pub fn deterministic() -> Self {
        Self { parallel: false, record_wall_clock: false }
    }
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { parallel: true, record_wall_clock: true }
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub config: ExperimentConfig,
    /// `w*_{t,k}` after the last completed round; slot 0 is the main model.
    pub global_weights: Vec<ParameterVector>,
    pub checkpoints: CheckpointBuffer,
    pub clients: Vec<ClientState>,
    pub server_control: Option<ParameterVector>,
    pub log: RunLog,
}

impl RunState {
    pub fn main_model(&self) -> &ParameterVector {
        &self.global_weights[0]
    }
}

/// What an observer sees at the end of each round.
#[derive(Debug)]
pub struct RoundSnapshot<'a> {
    pub round: usize,
    pub plan: &'a RoundPlan,
    /// Group averages before distillation.
    pub aggregates: &'a [ParameterVector],
    /// Weights carried into the next round.
    pub global_weights: &'a [ParameterVector],
    pub teacher: Option<&'a EnsembleSpec>,
    /// Distillation outcome per slot, `None` for slots left alone.
    pub reports: &'a [Option<DistillReport>],
    pub record: &'a MetricsRecord,
}

pub type Observer<'o> = &'o mut dyn FnMut(&RoundSnapshot) -> Result<()>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// All slots distilled every round.
    Basic,
    /// Basic, with distillation skipped for rounds `t <= W`.
    Warmup(usize),
    /// Only the main model distilled.
    Diversity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DistillTarget {
    Nothing,
    Main,
    AllSlots { warmup: usize },
}

pub(crate) struct HookCtx<'a> {
    pub spec: &'a NetworkSpec,
    pub test: &'a LabeledDataset,
}

#[derive(Debug, Default)]
pub(crate) struct RoundExtra {
    pub strategies: BTreeMap<String, f64>,
    /// Replaces the logged ensemble accuracy and member count.
    pub ensemble: Option<(f64, usize)>,
}

pub(crate) trait RoundHooks: Sync {
    fn train(&self, job: &GroupJob, members: Vec<&mut ClientState>) -> Result<GroupOutcome> {
        train_group(job, members)
    }

    fn after_round(&mut self, _ctx: &HookCtx, _buffer: &CheckpointBuffer) -> Result<RoundExtra> {
        Ok(RoundExtra::default())
    }
}

struct Plain;

impl RoundHooks for Plain {}

pub(crate) fn plan_round(cfg: &ExperimentConfig, k: usize, round: usize) -> Result<RoundPlan> {
    let participants = sample_participants(cfg.total_clients, cfg.participation, round, cfg.seed, k)?;
    assign_groups(&participants, k, round, cfg.seed)
}

pub(crate) fn initial_weights(cfg: &ExperimentConfig, spec: &NetworkSpec, k: usize) -> Vec<ParameterVector> {
    (0..k)
        .map(|slot| {
            let part = if cfg.shared_init { 0 } else { slot as u64 };
            init_weights(spec, derive_seed(cfg.seed, "init", &[part]))
        })
        .collect()
}

pub(crate) fn initial_control(local: &LocalConfig, dim: usize) -> Option<ParameterVector> {
    (local.trainer == TrainerKind::Scaffold).then(|| ParameterVector::zeros(dim))
}

/// `c <- c + (sum of member deltas) / total_clients`, summed in group order.
pub(crate) fn update_control(control: &mut Option<ParameterVector>, outcomes: &[GroupOutcome], total_clients: usize) {
    let Some(c) = control.as_mut() else { return };
    let scale = 1.0 / total_clients as f64;
    let mut sum = vec![0.0; c.len()];
    for delta in outcomes.iter().filter_map(|o| o.control_delta_sum.as_ref()) {
        for (s, d) in sum.iter_mut().zip(delta) {
            *s += d;
        }
    }
    for (c, s) in c.as_mut_slice().iter_mut().zip(sum) {
        *c += s * scale;
    }
}

pub(crate) struct Timer(Option<Instant>);

impl Timer {
    pub fn start(enabled: bool) -> Self {
        Timer(enabled.then(Instant::now))
    }

    pub fn ms(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_groups<H: RoundHooks>(
    hooks: &H,
    spec: &NetworkSpec,
    local: &LocalConfig,
    clients: &mut [ClientState],
    plan: &RoundPlan,
    inits: &[ParameterVector],
    control: Option<&ParameterVector>,
    seed: u64,
    parallel: bool,
    range: Range<usize>,
) -> Result<Vec<GroupOutcome>> {
    let selected: Vec<(usize, Vec<&mut ClientState>)> =
        select_groups(clients, plan).into_iter().enumerate().filter(|(k, _)| range.contains(k)).collect();
    let run = |(k, members): (usize, Vec<&mut ClientState>)| {
        let job = GroupJob { spec, init: &inits[k], local, server_control: control, seed, parallel };
        hooks.train(&job, members)
    };
    if parallel {
        selected.into_par_iter().map(run).collect()
    } else {
        selected.into_iter().map(run).collect()
    }
}

fn local_seed(cfg: &ExperimentConfig, round: usize) -> u64 {
    derive_seed(cfg.seed, "local", &[round as u64])
}

fn distill_seed(cfg: &ExperimentConfig, round: usize, slot: usize) -> u64 {
    derive_seed(cfg.seed, "distill", &[round as u64, slot as u64])
}

pub(crate) fn run_engine<H: RoundHooks>(
    cfg: &ExperimentConfig,
    data: &Datasets,
    opts: RunOptions,
    target: DistillTarget,
    hooks: &mut H,
    mut observer: Option<Observer>,
) -> Result<RunState> {
    cfg.validate()?;
    let spec = cfg.network()?;
    let k_models = cfg.models();
    let local = cfg.local_config();
    let dim = spec.param_count();
    let mut clients = data.clients()?;
    let mut globals = initial_weights(cfg, &spec, k_models);
    let mut buffer = CheckpointBuffer::new(k_models, cfg.checkpoints, dim)?;
    let mut control = initial_control(&local, dim);
    let mut records = Vec::with_capacity(cfg.rounds);
    // groups 1..K of the next round, trained while slot 0 was distilled
    let mut pending: Option<(RoundPlan, Vec<GroupOutcome>)> = None;

    for t in 1..=cfg.rounds {
        let timer = Timer::start(opts.record_wall_clock);
        let (plan, outcomes) = match pending.take() {
            Some((plan, rest)) => {
                let mut first = train_groups(
                    hooks, &spec, &local, &mut clients, &plan, &globals, control.as_ref(), local_seed(cfg, t),
                    opts.parallel, 0..1,
                )
                .map_err(|e| e.in_round(t, "local"))?;
                first.extend(rest);
                (plan, first)
            }
            None => {
                let plan = plan_round(cfg, k_models, t).map_err(|e| e.in_round(t, "plan"))?;
                let out = train_groups(
                    hooks, &spec, &local, &mut clients, &plan, &globals, control.as_ref(), local_seed(cfg, t),
                    opts.parallel, 0..k_models,
                )
                .map_err(|e| e.in_round(t, "local"))?;
                (plan, out)
            }
        };
        let local_ms = timer.ms();

        let aggregates: Vec<ParameterVector> = outcomes.iter().map(|o| o.aggregate.weights.clone()).collect();
        update_control(&mut control, &outcomes, cfg.total_clients);
        for (k, w) in aggregates.iter().enumerate() {
            buffer.push(k, w.clone()).map_err(|e| e.in_round(t, "checkpoint"))?;
        }

        let timer = Timer::start(opts.record_wall_clock);
        let slots: Vec<usize> = match target {
            DistillTarget::Nothing => vec![],
            DistillTarget::Main => vec![0],
            DistillTarget::AllSlots { warmup } if t > warmup => (0..k_models).collect(),
            DistillTarget::AllSlots { .. } => vec![],
        };
        let teacher = if slots.is_empty() {
            None
        } else {
            Some(build_ensemble(&buffer).map_err(|e| e.in_round(t, "ensemble"))?)
        };
        let mut reports: Vec<Option<DistillReport>> = vec![None; k_models];
        globals = aggregates.clone();
        if let Some(teacher) = &teacher {
            let run_slot = |k: usize| distill(&spec, &aggregates[k], teacher, &data.pool, &cfg.distill, distill_seed(cfg, t, k));
            let pipelined = opts.parallel && target == DistillTarget::Main && k_models > 1 && t < cfg.rounds;
            if pipelined {
                let shared_hooks: &H = hooks;
                let next_plan = plan_round(cfg, k_models, t + 1).map_err(|e| e.in_round(t + 1, "plan"))?;
                let (main, rest) = rayon::join(
                    || run_slot(0),
                    || {
                        train_groups(
                            shared_hooks, &spec, &local, &mut clients, &next_plan, &aggregates, control.as_ref(),
                            local_seed(cfg, t + 1), true, 1..k_models,
                        )
                    },
                );
                reports[0] = Some(main.map_err(|e| e.in_round(t, "distill"))?);
                pending = Some((next_plan, rest.map_err(|e| e.in_round(t + 1, "local"))?));
            } else if opts.parallel && slots.len() > 1 {
                let out: Vec<Result<DistillReport>> = slots.par_iter().map(|&k| run_slot(k)).collect();
                for (&k, r) in slots.iter().zip(out) {
                    reports[k] = Some(r.map_err(|e| e.in_round(t, "distill"))?);
                }
            } else {
                for &k in &slots {
                    reports[k] = Some(run_slot(k).map_err(|e| e.in_round(t, "distill"))?);
                }
            }
            for (k, r) in reports.iter().enumerate() {
                if let Some(r) = r {
                    globals[k] = r.weights.clone();
                }
            }
            if cfg.checkpoint_distilled_main && reports[0].is_some() {
                buffer.replace_newest(0, globals[0].clone()).map_err(|e| e.in_round(t, "checkpoint"))?;
            }
        }
        let distill_ms = timer.ms();

        let timer = Timer::start(opts.record_wall_clock);
        let eval = |w: &ParameterVector| evaluate(&spec, w, &data.test);
        let slot_accuracy = globals.iter().map(eval).collect::<Result<Vec<f64>>>().map_err(|e| e.in_round(t, "eval"))?;
        let ensemble = build_ensemble(&buffer).map_err(|e| e.in_round(t, "ensemble"))?;
        let mut ensemble_accuracy = evaluate(&spec, &ensemble, &data.test).map_err(|e| e.in_round(t, "eval"))?;
        let mut ensemble_members = ensemble.len();
        let ctx = HookCtx { spec: &spec, test: &data.test };
        let extra = hooks.after_round(&ctx, &buffer).map_err(|e| e.in_round(t, "eval"))?;
        if let Some((acc, members)) = extra.ensemble {
            ensemble_accuracy = acc;
            ensemble_members = members;
        }
        let eval_ms = timer.ms();

        let ran: Vec<&DistillReport> = reports.iter().flatten().filter(|r| r.steps_run > 0).collect();
        let main_report = reports[0].as_ref();
        let record = MetricsRecord {
            round: t,
            groups: plan.groups.clone(),
            main_accuracy: slot_accuracy[0],
            slot_accuracy,
            ensemble_accuracy,
            ensemble_members,
            strategy_accuracy: extra.strategies,
            distill_steps: main_report.map_or(0, |r| r.steps_run),
            probe_kl_before: main_report.and_then(|r| r.probe_kl_before),
            probe_kl_after: main_report.and_then(|r| r.probe_kl_after),
            teacher_forwards_per_batch: ran.first().map_or(0, |r| r.teacher_forwards_per_batch),
            teacher_forwards: ran.iter().map(|r| r.teacher_forwards).sum(),
            phase_ms: PhaseTimes { local_ms, distill_ms, eval_ms },
        };
        if let Some(obs) = observer.as_mut() {
            obs(&RoundSnapshot {
                round: t,
                plan: &plan,
                aggregates: &aggregates,
                global_weights: &globals,
                teacher: teacher.as_ref(),
                reports: &reports,
                record: &record,
            })?;
        }
        records.push(record);
    }

    Ok(RunState {
        config: cfg.clone(),
        global_weights: globals,
        checkpoints: buffer,
        clients,
        server_control: control,
        log: RunLog { method: cfg.method.name().to_string(), seed: cfg.seed, records },
    })
}

fn with_method(cfg: &ExperimentConfig, method: Method) -> ExperimentConfig {
    ExperimentConfig { method, ..cfg.clone() }
}

/// Runs `cfg.method`.
pub fn run(cfg: &ExperimentConfig, data: &Datasets, opts: RunOptions) -> Result<RunState> {
    run_observed(cfg, data, opts, None)
}

/// Like [`run`], calling `observer` after every round. FedDF runs do not
/// report snapshots.
pub fn run_observed(cfg: &ExperimentConfig, data: &Datasets, opts: RunOptions, observer: Option<Observer>) -> Result<RunState> {
    let target = match cfg.method {
        Method::FedAvg | Method::FedProx | Method::Scaffold => DistillTarget::Nothing,
        Method::FedSdd | Method::AblationDiversity => DistillTarget::Main,
        Method::AblationBasic => DistillTarget::AllSlots { warmup: 0 },
        Method::AblationWarmup => DistillTarget::AllSlots { warmup: cfg.warmup_rounds },
        Method::FedDf => return super::feddf::run_feddf(cfg, data, cfg.feddf.drop_worst, cfg.feddf.early_stop, opts),
        Method::EnsembleEval => return super::ensemble_eval::run_ensemble_eval_observed(cfg, data, opts, observer),
    };
    run_engine(cfg, data, opts, target, &mut Plain, observer)
}

pub fn run_fedsdd(cfg: &ExperimentConfig, data: &Datasets, opts: RunOptions) -> Result<RunState> {
    run(&with_method(cfg, Method::FedSdd), data, opts)
}

pub fn run_fedavg(cfg: &ExperimentConfig, data: &Datasets, opts: RunOptions) -> Result<RunState> {
    run(&with_method(cfg, Method::FedAvg), data, opts)
}

pub fn run_fedprox(cfg: &ExperimentConfig, data: &Datasets, opts: RunOptions) -> Result<RunState> {
    run(&with_method(cfg, Method::FedProx), data, opts)
}

pub fn run_scaffold(cfg: &ExperimentConfig, data: &Datasets, opts: RunOptions) -> Result<RunState> {
    run(&with_method(cfg, Method::Scaffold), data, opts)
}

pub fn run_ablation(cfg: &ExperimentConfig, data: &Datasets, variant: AblationVariant, opts: RunOptions) -> Result<RunState> {
    let cfg = match variant {
        AblationVariant::Basic => with_method(cfg, Method::AblationBasic),
        AblationVariant::Warmup(w) => ExperimentConfig { warmup_rounds: w, ..with_method(cfg, Method::AblationWarmup) },
        AblationVariant::Diversity => with_method(cfg, Method::AblationDiversity),
    };
    run(&cfg, data, opts)
}
