//! Discrete-event simulation of round scheduling under limited client
//! availability.
//!
//! Two policies are compared. The sequential one (FedDF and other
//! distillation-based methods) starts round `t + 1` only after round `t`'s
//! distillation. The FedSDD policy lets group `k >= 1` start round `t + 1`
//! as soon as its own round-`t` aggregate exists; only the main group waits
//! for distillation. Time is integer logical time.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub local_train_cost: u64,
    pub kd_cost: u64,
    /// Overrides `local_train_cost` per client when present.
    #[serde(default)]
    pub per_client: Option<Vec<u64>>,
}

impl CostModel {
    pub fn uniform(local_train_cost: u64, kd_cost: u64) -> Self {
        Self { local_train_cost, kd_cost, per_client: None }
    }

    pub fn train_cost(&self, client: usize) -> u64 {
        self.per_client
            .as_ref()
            .and_then(|c| c.get(client).copied())
            .unwrap_or(self.local_train_cost)
    }
}

/// Half-open availability window `[start, end)`; `end = None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: u64,
    pub end: Option<u64>,
}

impl Interval {
    fn fits(&self, now: u64, duration: u64) -> bool {
        self.start <= now
            && match self.end {
                None => true,
                Some(end) => now + duration <= end && (duration > 0 || now < end),
            }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvailabilityTrace {
    windows: Vec<Vec<Interval>>,
    max_concurrent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for TraceParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for TraceParseError {}

impl AvailabilityTrace {
    pub fn new(windows: Vec<Vec<Interval>>, max_concurrent: Option<usize>) -> Result<Self> {
        let mut windows = windows;
        for (client, w) in windows.iter_mut().enumerate() {
            w.sort_by_key(|i| i.start);
            for i in w.iter() {
                if matches!(i.end, Some(e) if e <= i.start) {
                    return Err(Error::InvalidArgument(format!("client {client}: empty interval {i:?}")));
                }
            }
            for pair in w.windows(2) {
                if pair[0].end.is_none_or(|e| e > pair[1].start) {
                    return Err(Error::InvalidArgument(format!("client {client}: overlapping intervals")));
                }
            }
        }
        if max_concurrent == Some(0) {
            return Err(Error::InvalidArgument("max_concurrent must be positive".into()));
        }
        Ok(Self { windows, max_concurrent })
    }

    pub fn always_available(clients: usize) -> Self {
        Self { windows: vec![vec![Interval { start: 0, end: None }]; clients], max_concurrent: None }
    }

    /// Any client may train, but only one at a time.
    pub fn one_at_a_time(clients: usize) -> Self {
        Self { max_concurrent: Some(1), ..Self::always_available(clients) }
    }

    pub fn clients(&self) -> usize {
        self.windows.len()
    }

    pub fn windows(&self, client: usize) -> &[Interval] {
        &self.windows[client]
    }

    pub fn max_concurrent(&self) -> Option<usize> {
        self.max_concurrent
    }

    pub fn available(&self, client: usize, now: u64, duration: u64) -> bool {
        self.windows[client].iter().any(|i| i.fits(now, duration))
    }

    /// Text format, one directive per line, `#` starts a comment:
    ///
    /// ```text
    /// clients 4
    /// max_concurrent 1
    /// window 0 0 10      # client, start, end
    /// window 1 5 inf
    /// ```
    ///
    /// `one_at_a_time N` and `always N` are shorthands for whole traces.
    pub fn parse(text: &str) -> Result<Self, TraceParseError> {
        let mut clients: Option<usize> = None;
        let mut max_concurrent = None;
        let mut windows: Vec<(usize, usize, Interval)> = Vec::new();
        let mut preset: Option<Self> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| TraceParseError { line, message };
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            let num = |s: &str| -> Result<u64, TraceParseError> {
                s.parse::<u64>().map_err(|_| err(format!("expected a non-negative integer, got {s:?}")))
            };
            match (fields[0], fields.len()) {
                ("clients", 2) => clients = Some(num(fields[1])? as usize),
                ("max_concurrent", 2) => {
                    let n = num(fields[1])? as usize;
                    if n == 0 {
                        return Err(err("max_concurrent must be positive".into()));
                    }
                    max_concurrent = Some(n);
                }
                ("one_at_a_time", 2) => preset = Some(Self::one_at_a_time(num(fields[1])? as usize)),
                ("always", 2) => preset = Some(Self::always_available(num(fields[1])? as usize)),
                ("window", 4) => {
                    let client = num(fields[1])? as usize;
                    let start = num(fields[2])?;
                    let end = match fields[3] {
                        "inf" => None,
                        s => Some(num(s)?),
                    };
                    if matches!(end, Some(e) if e <= start) {
                        return Err(err(format!("window end {} not after start {start}", fields[3])));
                    }
                    windows.push((line, client, Interval { start, end }));
                }
                (word, n) => return Err(err(format!("unrecognized directive {word:?} with {} arguments", n - 1))),
            }
        }
        if let Some(p) = preset {
            if !windows.is_empty() {
                let line = windows[0].0;
                return Err(TraceParseError { line, message: "window lines conflict with a preset trace".into() });
            }
            return Ok(p);
        }
        let n = clients.unwrap_or_else(|| windows.iter().map(|w| w.1 + 1).max().unwrap_or(0));
        let mut per_client = vec![Vec::new(); n];
        for &(line, client, interval) in &windows {
            if client >= n {
                return Err(TraceParseError { line, message: format!("client {client} >= declared count {n}") });
            }
            per_client[client].push((line, interval));
        }
        for list in &mut per_client {
            list.sort_by_key(|(_, i)| i.start);
            for pair in list.windows(2) {
                if pair[0].1.end.is_none_or(|e| e > pair[1].1.start) {
                    return Err(TraceParseError { line: pair[1].0, message: "overlaps an earlier window".into() });
                }
            }
        }
        let windows = per_client.into_iter().map(|l| l.into_iter().map(|(_, i)| i).collect()).collect();
        Ok(Self { windows, max_concurrent })
    }
}

/// Per-round group membership; `rounds[t][k]` lists the clients training
/// model `k` in round `t + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    rounds: Vec<Vec<Vec<usize>>>,
}

impl Workload {
    pub fn new(rounds: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::InvalidArgument("workload needs at least one round".into()));
        }
        let k = rounds[0].len();
        for (t, groups) in rounds.iter().enumerate() {
            if groups.len() != k || k == 0 {
                return Err(Error::InvalidArgument(format!("round {}: expected {k} groups", t + 1)));
            }
            let mut seen: Vec<usize> = groups.concat();
            let n = seen.len();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != n {
                return Err(Error::InvalidArgument(format!("round {}: client listed twice", t + 1)));
            }
        }
        Ok(Self { rounds })
    }

    /// The same grouping every round.
    pub fn fixed(rounds: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(vec![groups; rounds])
    }

    /// Client `k` trains model `k` every round.
    pub fn one_client_per_model(rounds: usize, k: usize) -> Self {
        Self::fixed(rounds, (0..k).map(|c| vec![c]).collect()).expect("well-formed")
    }

    pub fn rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn models(&self) -> usize {
        self.rounds[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Actor {
    Client(usize),
    Server,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Client(c) => write!(f, "client_{c}"),
            Actor::Server => f.write_str("server"),
        }
    }
}

/// Rounds are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Train { round: usize, group: usize },
    Distill { round: usize },
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Train { round, group } => write!(f, "train_r{round}_g{group}"),
            Task::Distill { round } => write!(f, "distill_r{round}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledTask {
    pub actor: Actor,
    pub task: Task,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub events: Vec<ScheduledTask>,
    /// Completion time of each round (end of its distillation).
    pub round_completion: Vec<u64>,
    pub round_times: Vec<u64>,
    pub makespan: u64,
}

impl Schedule {
    /// Duration of the last round.
    pub fn steady_state_round_time(&self) -> u64 {
        *self.round_times.last().expect("at least one round")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "actor,task,start,end")?;
        for e in &self.events {
            writeln!(out, "{},{},{},{}", e.actor, e.task, e.start, e.end)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Sequential,
    FedSddParallel,
}

struct TrainTask {
    round: usize,
    group: usize,
    client: usize,
    duration: u64,
    start: Option<u64>,
    end: Option<u64>,
}

pub fn simulate_sequential(workload: &Workload, trace: &AvailabilityTrace, cost: &CostModel) -> Result<Schedule> {
    simulate(Policy::Sequential, workload, trace, cost)
}

pub fn simulate_fedsdd_parallel(workload: &Workload, trace: &AvailabilityTrace, cost: &CostModel) -> Result<Schedule> {
    simulate(Policy::FedSddParallel, workload, trace, cost)
}

pub fn simulate(policy: Policy, workload: &Workload, trace: &AvailabilityTrace, cost: &CostModel) -> Result<Schedule> {
    let rounds = workload.rounds();
    let mut tasks: Vec<TrainTask> = Vec::new();
    for (t, groups) in workload.rounds.iter().enumerate() {
        for (k, members) in groups.iter().enumerate() {
            for &client in members {
                if client >= trace.clients() {
                    return Err(Error::Infeasible(format!("client {client} missing from the trace")));
                }
                let duration = cost.train_cost(client);
                if !trace.windows(client).iter().any(|i| i.end.is_none_or(|e| e - i.start >= duration)) {
                    return Err(Error::Infeasible(format!(
                        "client {client} is never available for {duration} time units"
                    )));
                }
                tasks.push(TrainTask { round: t + 1, group: k, client, duration, start: None, end: None });
            }
        }
    }
    // priority: earlier round, then lower group (main first), then client id
    tasks.sort_by_key(|x| (x.round, x.group, x.client));

    let mut distill_start: Vec<Option<u64>> = vec![None; rounds + 1];
    let mut distill_end: Vec<Option<u64>> = vec![None; rounds + 1];
    distill_end[0] = Some(0);
    let mut client_busy_until = vec![0u64; trace.clients()];
    let mut server_busy_until = 0u64;
    let mut now = 0u64;

    let done = |end: Option<u64>, now: u64| end.is_some_and(|e| e <= now);

    loop {
        // repeat at the same instant until nothing else can start
        loop {
            let mut progressed = false;

            let next_kd = (1..=rounds).find(|&t| distill_start[t].is_none());
            if let Some(t) = next_kd {
                let trained = tasks.iter().filter(|x| x.round == t).all(|x| done(x.end, now));
                if trained && done(distill_end[t - 1], now) && server_busy_until <= now {
                    distill_start[t] = Some(now);
                    distill_end[t] = Some(now + cost.kd_cost);
                    server_busy_until = now + cost.kd_cost;
                    progressed = true;
                }
            }

            let mut running = tasks.iter().filter(|x| x.start.is_some() && !done(x.end, now)).count();
            for i in 0..tasks.len() {
                if tasks[i].start.is_some() {
                    continue;
                }
                if trace.max_concurrent().is_some_and(|cap| running >= cap) {
                    break;
                }
                let (round, group, client, duration) = (tasks[i].round, tasks[i].group, tasks[i].client, tasks[i].duration);
                let released = match policy {
                    Policy::Sequential => done(distill_end[round - 1], now),
                    Policy::FedSddParallel if group == 0 || round == 1 => done(distill_end[round - 1], now),
                    Policy::FedSddParallel => tasks
                        .iter()
                        .filter(|x| x.round == round - 1 && x.group == group)
                        .all(|x| done(x.end, now)),
                };
                let client_ready = client_busy_until[client] <= now
                    && tasks.iter().all(|x| x.client != client || x.round >= round || done(x.end, now));
                if released && client_ready && trace.available(client, now, duration) {
                    tasks[i].start = Some(now);
                    tasks[i].end = Some(now + duration);
                    client_busy_until[client] = now + duration;
                    running += usize::from(duration > 0);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }

        if distill_end[rounds].is_some_and(|e| e <= now) {
            break;
        }
        let mut next = u64::MAX;
        for x in &tasks {
            if let Some(e) = x.end.filter(|&e| e > now) {
                next = next.min(e);
            }
        }
        if server_busy_until > now {
            next = next.min(server_busy_until);
        }
        for w in &trace.windows {
            if let Some(i) = w.iter().find(|i| i.start > now) {
                next = next.min(i.start);
            }
        }
        if next == u64::MAX {
            return Err(Error::Infeasible(format!("no task can start after time {now}")));
        }
        now = next;
    }

    let mut events: Vec<ScheduledTask> = tasks
        .iter()
        .map(|x| ScheduledTask {
            actor: Actor::Client(x.client),
            task: Task::Train { round: x.round, group: x.group },
            start: x.start.unwrap(),
            end: x.end.unwrap(),
        })
        .chain((1..=rounds).map(|t| ScheduledTask {
            actor: Actor::Server,
            task: Task::Distill { round: t },
            start: distill_start[t].unwrap(),
            end: distill_end[t].unwrap(),
        }))
        .collect();
    events.sort_by_key(|e| (e.start, e.actor, e.task));
    let round_completion: Vec<u64> = (1..=rounds).map(|t| distill_end[t].unwrap()).collect();
    let mut prev = 0;
    let round_times = round_completion
        .iter()
        .map(|&c| {
            let d = c - prev;
            prev = c;
            d
        })
        .collect();
    let makespan = *round_completion.last().unwrap();
    Ok(Schedule { events, round_completion, round_times, makespan })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Ensemble of every participating client model.
    FedDf,
    /// Temporal ensemble of `K` aggregated global models.
    FedSdd,
}

/// Teacher forward cost of one distillation batch.
pub fn teacher_cost(kind: TeacherKind, participants: usize, k: usize, r_prime: usize, per_model_cost: u64) -> u64 {
    match kind {
        TeacherKind::FedDf => participants as u64 * per_model_cost,
        TeacherKind::FedSdd => (k * r_prime) as u64 * per_model_cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_client_online_at_a_time() {
        let work = Workload::one_client_per_model(6, 4);
        let trace = AvailabilityTrace::one_at_a_time(4);
        let cost = CostModel::uniform(1, 1);
        let seq = simulate_sequential(&work, &trace, &cost).unwrap();
        assert_eq!(seq.round_times, vec![5; 6]);
        let par = simulate_fedsdd_parallel(&work, &trace, &cost).unwrap();
        assert_eq!(par.round_times, vec![5, 4, 4, 4, 4, 4]);
        assert_eq!(par.steady_state_round_time(), 4);
        // round 2: model 1 first while the server distills, then the main model
        let r2: Vec<(Actor, u64)> = par
            .events
            .iter()
            .filter(|e| matches!(e.task, Task::Train { round: 2, .. }))
            .map(|e| (e.actor, e.start))
            .collect();
        assert_eq!(r2, vec![(Actor::Client(1), 4), (Actor::Client(0), 5), (Actor::Client(2), 6), (Actor::Client(3), 7)]);
    }

    #[test]
    fn zero_kd_cost_is_plain_fedavg_timing() {
        let work = Workload::one_client_per_model(5, 4);
        let trace = AvailabilityTrace::one_at_a_time(4);
        let cost = CostModel::uniform(1, 0);
        let seq = simulate_sequential(&work, &trace, &cost).unwrap();
        let par = simulate_fedsdd_parallel(&work, &trace, &cost).unwrap();
        assert_eq!(seq.round_times, vec![4; 5]);
        assert_eq!(seq.makespan, par.makespan);
    }

    #[test]
    fn unconstrained_round_is_max_plus_kd() {
        let work = Workload::fixed(3, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let trace = AvailabilityTrace::always_available(4);
        let cost = CostModel { local_train_cost: 1, kd_cost: 2, per_client: Some(vec![3, 7, 2, 5]) };
        let seq = simulate_sequential(&work, &trace, &cost).unwrap();
        assert_eq!(seq.round_times, vec![9, 9, 9]);
    }

    #[test]
    fn never_available_client_is_infeasible() {
        let work = Workload::one_client_per_model(2, 2);
        let trace = AvailabilityTrace::new(
            vec![vec![Interval { start: 0, end: None }], vec![Interval { start: 0, end: Some(1) }]],
            None,
        )
        .unwrap();
        let cost = CostModel::uniform(2, 1);
        assert!(matches!(simulate_sequential(&work, &trace, &cost), Err(Error::Infeasible(_))));
        let trace = AvailabilityTrace::new(vec![vec![Interval { start: 0, end: None }], vec![]], None).unwrap();
        assert!(matches!(simulate_fedsdd_parallel(&work, &trace, &cost), Err(Error::Infeasible(_))));
    }

    #[test]
    fn teacher_costs() {
        for n in [8, 14, 20] {
            assert_eq!(teacher_cost(TeacherKind::FedSdd, n, 4, 1, 3), 12);
            assert_eq!(teacher_cost(TeacherKind::FedDf, n, 4, 1, 3), 3 * n as u64);
        }
        assert_eq!(teacher_cost(TeacherKind::FedSdd, 8, 4, 2, 1), teacher_cost(TeacherKind::FedDf, 8, 4, 2, 1));
    }

    #[test]
    fn trace_parsing() {
        let t = AvailabilityTrace::parse("clients 2\n# c\nwindow 0 0 inf\nwindow 1 3 5 # late\nwindow 1 7 9\nmax_concurrent 1\n").unwrap();
        assert_eq!(t.clients(), 2);
        assert_eq!(t.max_concurrent(), Some(1));
        assert_eq!(t.windows(1), &[Interval { start: 3, end: Some(5) }, Interval { start: 7, end: Some(9) }]);
        assert_eq!(AvailabilityTrace::parse("one_at_a_time 4").unwrap(), AvailabilityTrace::one_at_a_time(4));
        let e = AvailabilityTrace::parse("clients 2\nwindow 0 0 x\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = AvailabilityTrace::parse("window 0 0 5\nwindow 0 4 9\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = AvailabilityTrace::parse("\n\nbogus 1 2\n").unwrap_err();
        assert_eq!(e.line, 3);
        let e = AvailabilityTrace::parse("clients 1\nwindow 3 0 1\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn gantt_csv() {
        let s = simulate_sequential(&Workload::one_client_per_model(1, 2), &AvailabilityTrace::one_at_a_time(2), &CostModel::uniform(1, 1)).unwrap();
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "actor,task,start,end\nclient_0,train_r1_g0,0,1\nclient_1,train_r1_g1,1,2\nserver,distill_r1,2,3\n"
        );
    }
}
