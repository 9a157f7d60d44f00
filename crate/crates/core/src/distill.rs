//! Checkpoint history, ensemble teachers and server-side distillation.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::UnlabeledPool;
use crate::error::{Error, Result};
use crate::nn::{forward, kl_loss_grad, mean_kl, sgd_step, softmax_rows, Batch, NetworkSpec, ParameterVector};
use crate::seed::rng_for;

/// Per-model rings of the most recent aggregated weights, newest first.
#[derive(Debug, Clone)]
pub struct CheckpointBuffer {
    capacity: usize,
    dim: usize,
    rings: Vec<VecDeque<ParameterVector>>,
}

impl CheckpointBuffer {
    pub fn new(models: usize, capacity: usize, dim: usize) -> Result<Self> {
        if models == 0 || capacity == 0 {
            return Err(Error::InvalidArgument("checkpoint buffer needs K >= 1 and R >= 1".into()));
        }
        Ok(Self { capacity, dim, rings: vec![VecDeque::with_capacity(capacity); models] })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn models(&self) -> usize {
        self.rings.len()
    }

    /// Entry `r` holds the weights pushed `r` rounds ago.
    pub fn ring(&self, k: usize) -> &VecDeque<ParameterVector> {
        &self.rings[k]
    }

    pub fn push(&mut self, k: usize, w: ParameterVector) -> Result<()> {
        if k >= self.rings.len() {
            return Err(Error::InvalidArgument(format!("model index {k} >= K = {}", self.rings.len())));
        }
        if w.len() != self.dim {
            return Err(Error::LengthMismatch { expected: self.dim, actual: w.len() });
        }
        let ring = &mut self.rings[k];
        ring.push_front(w);
        ring.truncate(self.capacity);
        Ok(())
    }

    /// Overwrites the newest entry of ring `k`.
    pub fn replace_newest(&mut self, k: usize, w: ParameterVector) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::LengthMismatch { expected: self.dim, actual: w.len() });
        }
        match self.rings.get_mut(k).and_then(VecDeque::front_mut) {
            Some(front) => {
                *front = w;
                Ok(())
            }
            None => Err(Error::EmptyCheckpointRing(k)),
        }
    }

    /// Depth usable by every model, `min(R, rounds recorded)`.
    pub fn usable_depth(&self) -> usize {
        self.rings.iter().map(VecDeque::len).min().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    /// Global model index, or client id for client ensembles.
    pub slot: usize,
    /// Rounds since this checkpoint was taken.
    pub age: usize,
    pub weights: ParameterVector,
}

/// Uniformly weighted logit-averaging ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    members: Vec<EnsembleMember>,
    coefficient: f64,
}

impl EnsembleSpec {
    /// Members are kept in `(slot, age)` order regardless of input order.
    pub fn uniform(mut members: Vec<EnsembleMember>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        members.sort_by_key(|m| (m.slot, m.age));
        let coefficient = 1.0 / members.len() as f64;
        Ok(Self { members, coefficient })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    /// `(1 / |members|) * sum of member logits`.
    pub fn averaged_logits(&self, spec: &NetworkSpec, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut acc: Option<Array2<f64>> = None;
        for m in &self.members {
            let logits = forward(spec, &m.weights, &Batch::unlabeled(inputs))?;
            match acc.as_mut() {
                Some(a) => *a += &logits,
                None => acc = Some(logits),
            }
        }
        let mut avg = acc.expect("ensemble is non-empty");
        avg.mapv_inplace(|v| v * self.coefficient);
        Ok(avg)
    }
}

/// Temporal ensemble over the `R' = min(R, rounds so far)` newest checkpoints
/// of every model.
pub fn build_ensemble(buf: &CheckpointBuffer) -> Result<EnsembleSpec> {
    build_ensemble_with_depth(buf, buf.capacity)
}

/// Like [`build_ensemble`] with the depth further capped at `depth`.
pub fn build_ensemble_with_depth(buf: &CheckpointBuffer, depth: usize) -> Result<EnsembleSpec> {
    if let Some(k) = buf.rings.iter().position(VecDeque::is_empty) {
        return Err(Error::EmptyCheckpointRing(k));
    }
    if depth == 0 {
        return Err(Error::InvalidArgument("ensemble depth must be positive".into()));
    }
    let depth = buf.usable_depth().min(depth);
    let members = buf
        .rings
        .iter()
        .enumerate()
        .flat_map(|(slot, ring)| {
            ring.iter().take(depth).enumerate().map(move |(age, w)| EnsembleMember { slot, age, weights: w.clone() })
        })
        .collect();
    EnsembleSpec::uniform(members)
}

/// Teacher probabilities: softmax of the averaged logits at temperature `tau`.
pub fn ensemble_forward(ens: &EnsembleSpec, spec: &NetworkSpec, batch: &Batch, tau: f64) -> Result<Array2<f64>> {
    softmax_rows(&ens.averaged_logits(spec, batch.inputs)?, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 64, lr: 0.1, tau: 4.0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("distill batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("distill lr must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub weights: ParameterVector,
    pub steps_run: usize,
    /// Member forwards per distillation batch, `|ensemble|`.
    pub teacher_forwards_per_batch: u64,
    pub teacher_forwards: u64,
    pub probe_kl_before: Option<f64>,
    pub probe_kl_after: Option<f64>,
}

/// Rows of the pool used to measure KL before and after distillation.
pub const PROBE_ROWS: usize = 256;

fn probe_kl(spec: &NetworkSpec, w: &ParameterVector, probe: ArrayView2<f64>, teacher: &Array2<f64>, tau: f64) -> Result<f64> {
    mean_kl(spec, w, probe, teacher, tau)
}

/// Called every `interval` steps with the current student; returning `true`
/// stops distillation.
pub struct Monitor<'m> {
    pub interval: usize,
    pub on_check: &'m mut dyn FnMut(usize, &ParameterVector) -> Result<bool>,
}

/// SGD on `KL(teacher || student)` over batches drawn with replacement from
/// the pool. The teacher is never modified.
pub fn distill(
    spec: &NetworkSpec,
    student_init: &ParameterVector,
    ens: &EnsembleSpec,
    pool: &UnlabeledPool,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillReport> {
    distill_monitored(spec, student_init, ens, pool, cfg, seed, None)
}

pub fn distill_monitored(
    spec: &NetworkSpec,
    student_init: &ParameterVector,
    ens: &EnsembleSpec,
    pool: &UnlabeledPool,
    cfg: &DistillConfig,
    seed: u64,
    mut monitor: Option<Monitor>,
) -> Result<DistillReport> {
    cfg.validate()?;
    spec.check_params(student_init)?;
    for m in ens.members() {
        spec.check_params(&m.weights)?;
    }
    if pool.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch { layer: 0, expected: spec.input_dim(), actual: pool.dim() });
    }
    let per_batch = ens.len() as u64;
    if cfg.steps == 0 {
        return Ok(DistillReport {
            weights: student_init.clone(),
            steps_run: 0,
            teacher_forwards_per_batch: per_batch,
            teacher_forwards: 0,
            probe_kl_before: None,
            probe_kl_after: None,
        });
    }

    let probe_idx: Vec<usize> = (0..pool.len().min(PROBE_ROWS)).collect();
    let probe = pool.rows(&probe_idx);
    let probe_teacher = ensemble_forward(ens, spec, &Batch::unlabeled(probe.view()), cfg.tau)?;
    let before = probe_kl(spec, student_init, probe.view(), &probe_teacher, cfg.tau)?;

    let mut rng = rng_for(seed, "distill-batches", &[]);
    let mut w = student_init.clone();
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pool.len())).collect();
        let inputs = pool.rows(&idx);
        let batch = Batch::unlabeled(inputs.view());
        let teacher = ensemble_forward(ens, spec, &batch, cfg.tau)?;
        let lg = kl_loss_grad(spec, &w, &batch, &teacher, cfg.tau)?;
        if !lg.loss.is_finite() {
            return Err(Error::DistillDivergence { step });
        }
        w = sgd_step(&w, &lg.grad, cfg.lr).map_err(|_| Error::DistillDivergence { step })?;
        steps_run = step + 1;
        if let Some(m) = monitor.as_mut() {
            if m.interval > 0 && steps_run % m.interval == 0 && (m.on_check)(steps_run, &w)? {
                break;
            }
        }
    }
    let after = probe_kl(spec, &w, probe.view(), &probe_teacher, cfg.tau)?;
    Ok(DistillReport {
        weights: w,
        steps_run,
        teacher_forwards_per_batch: per_batch,
        teacher_forwards: per_batch * steps_run as u64,
        probe_kl_before: Some(before),
        probe_kl_after: Some(after),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::{init_weights, softmax, Activation};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: Vec<f64>) -> ParameterVector {
        ParameterVector::new(v).unwrap()
    }

    #[test]
    fn ring_eviction() {
        let mut buf = CheckpointBuffer::new(2, 3, 1).unwrap();
        buf.push(0, pv(vec![1.0])).unwrap();
        assert_eq!(buf.ring(0).len(), 1);
        for v in 2..=4 {
            buf.push(0, pv(vec![v as f64])).unwrap();
        }
        let ring: Vec<f64> = buf.ring(0).iter().map(|w| w.as_slice()[0]).collect();
        assert_eq!(ring, vec![4.0, 3.0, 2.0]);
        assert!(buf.ring(1).is_empty());
        assert!(matches!(buf.push(0, pv(vec![1.0, 2.0])), Err(Error::LengthMismatch { .. })));
        assert!(buf.push(2, pv(vec![1.0])).is_err());
        assert!(matches!(build_ensemble(&buf), Err(Error::EmptyCheckpointRing(1))));
    }

    #[test]
    fn interleaved_pushes_match_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut buf = CheckpointBuffer::new(3, 2, 1).unwrap();
        let mut log: Vec<(usize, f64)> = Vec::new();
        for i in 0..40 {
            let k = rng.random_range(0..3);
            buf.push(k, pv(vec![i as f64])).unwrap();
            log.push((k, i as f64));
        }
        for k in 0..3 {
            let expected: Vec<f64> = log.iter().rev().filter(|(kk, _)| *kk == k).take(2).map(|(_, v)| *v).collect();
            let got: Vec<f64> = buf.ring(k).iter().map(|w| w.as_slice()[0]).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn ensemble_sizes() {
        let mut buf = CheckpointBuffer::new(1, 1, 2).unwrap();
        buf.push(0, pv(vec![0.0, 0.0])).unwrap();
        let ens = build_ensemble(&buf).unwrap();
        assert_eq!((ens.len(), ens.coefficient()), (1, 1.0));

        let mut buf = CheckpointBuffer::new(4, 2, 1).unwrap();
        for round in 0..3 {
            for k in 0..4 {
                buf.push(k, pv(vec![(10 * round + k) as f64])).unwrap();
            }
        }
        let ens = build_ensemble(&buf).unwrap();
        assert_eq!((ens.len(), ens.coefficient()), (8, 0.125));

        let mut buf = CheckpointBuffer::new(4, 4, 1).unwrap();
        for k in 0..4 {
            buf.push(k, pv(vec![k as f64])).unwrap();
        }
        let ens = build_ensemble(&buf).unwrap();
        assert_eq!((ens.len(), ens.coefficient()), (4, 0.25));
        assert!(ens.members().iter().all(|m| m.age == 0));
    }

    #[test]
    fn ensemble_forward_cases() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let x = array![[1.0, 0.0]];
        // logits [2, 0] and [0, 2] average to [1, 1]
        let a = pv(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = pv(vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let ens = EnsembleSpec::uniform(vec![
            EnsembleMember { slot: 0, age: 0, weights: a.clone() },
            EnsembleMember { slot: 1, age: 0, weights: b },
        ])
        .unwrap();
        let p = ensemble_forward(&ens, &spec, &Batch::unlabeled(x.view()), 4.0).unwrap();
        assert_eq!(p, array![[0.5, 0.5]]);

        let single = EnsembleSpec::uniform(vec![EnsembleMember { slot: 0, age: 0, weights: a }]).unwrap();
        let p = ensemble_forward(&single, &spec, &Batch::unlabeled(x.view()), 4.0).unwrap();
        let want = softmax(&[2.0, 0.0], 4.0).unwrap();
        assert_eq!(p.row(0).to_vec(), want);
    }

    fn random_members(rng: &mut ChaCha8Rng, spec: &NetworkSpec, k: usize, r: usize) -> Vec<EnsembleMember> {
        let mut out = Vec::new();
        for slot in 0..k {
            for age in 0..r {
                let w = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
                out.push(EnsembleMember { slot, age, weights: pv(w) });
            }
        }
        out
    }

    proptest! {
        #[test]
        fn member_order_is_irrelevant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = NetworkSpec::new(vec![3, 4, 3], Activation::Tanh).unwrap();
            let mut members = random_members(&mut rng, &spec, 3, 2);
            let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
            let a = ensemble_forward(&EnsembleSpec::uniform(members.clone()).unwrap(), &spec, &Batch::unlabeled(x.view()), 2.0).unwrap();
            members.shuffle(&mut rng);
            let b = ensemble_forward(&EnsembleSpec::uniform(members).unwrap(), &spec, &Batch::unlabeled(x.view()), 2.0).unwrap();
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    fn setup() -> (NetworkSpec, UnlabeledPool, ParameterVector) {
        let spec = NetworkSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
        let pool = make_synthetic(3, 4, 50, 2.0, 1).unwrap().drop_labels();
        (spec.clone(), pool, init_weights(&spec, 5))
    }

    #[test]
    fn zero_steps_is_identity() {
        let (spec, pool, w) = setup();
        let ens = EnsembleSpec::uniform(vec![EnsembleMember { slot: 0, age: 0, weights: init_weights(&spec, 9) }]).unwrap();
        let cfg = DistillConfig { steps: 0, ..DistillConfig::default() };
        let out = distill(&spec, &w, &ens, &pool, &cfg, 1).unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.teacher_forwards, 0);
    }

    #[test]
    fn self_teacher_is_fixed_point() {
        let (spec, pool, w) = setup();
        let ens = EnsembleSpec::uniform(vec![EnsembleMember { slot: 0, age: 0, weights: w.clone() }]).unwrap();
        let cfg = DistillConfig { steps: 50, ..DistillConfig::default() };
        let out = distill(&spec, &w, &ens, &pool, &cfg, 1).unwrap();
        assert!(out.weights.as_slice().iter().zip(w.as_slice()).all(|(a, b)| (a - b).abs() <= 1e-9));
        assert!(out.probe_kl_before.unwrap() < 1e-12);
        assert_eq!(out.teacher_forwards, 50);
    }

    #[test]
    fn distillation_reduces_probe_kl() {
        let (spec, pool, w) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ens = EnsembleSpec::uniform(random_members(&mut rng, &spec, 4, 2)).unwrap();
        let cfg = DistillConfig { steps: 100, batch_size: 32, lr: 0.1, tau: 4.0 };
        let out = distill(&spec, &w, &ens, &pool, &cfg, 1).unwrap();
        assert!(out.probe_kl_after.unwrap() <= out.probe_kl_before.unwrap());
        assert_eq!(out.teacher_forwards_per_batch, 8);
        assert_eq!(out.teacher_forwards, 800);
    }

    #[test]
    fn monitor_can_stop_early() {
        let (spec, pool, w) = setup();
        let ens = EnsembleSpec::uniform(vec![EnsembleMember { slot: 0, age: 0, weights: init_weights(&spec, 9) }]).unwrap();
        let cfg = DistillConfig { steps: 100, ..DistillConfig::default() };
        let mut checks = Vec::new();
        let mut cb = |step: usize, _: &ParameterVector| -> Result<bool> {
            checks.push(step);
            Ok(step >= 30)
        };
        let out = distill_monitored(&spec, &w, &ens, &pool, &cfg, 1, Some(Monitor { interval: 10, on_check: &mut cb })).unwrap();
        assert_eq!(out.steps_run, 30);
        assert_eq!(checks, vec![10, 20, 30]);
    }

    #[test]
    fn divergence_is_reported() {
        let (spec, pool, w) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ens = EnsembleSpec::uniform(random_members(&mut rng, &spec, 2, 1)).unwrap();
        let cfg = DistillConfig { steps: 500, batch_size: 8, lr: 1e300, tau: 1.0 };
        assert!(matches!(distill(&spec, &w, &ens, &pool, &cfg, 1), Err(Error::DistillDivergence { .. })));
    }
}
