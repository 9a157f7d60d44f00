//! Round planning and within-group weighted averaging.
//!
//! This module is the server boundary. [`train_group`] runs the clients of one
//! group and hands back only the [`GroupAggregate`]; individual client models
//! leave it solely through [`train_group_releasing_clients`], which the
//! client-ensemble baselines (FedDF and the "Clients" ensemble evaluation)
//! opt into explicitly.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::{local_train, ClientState, LocalConfig, LocalResult};
use crate::nn::{NetworkSpec, ParameterVector};
use crate::seed::rng_for;
use crate::sum::pairwise_sum;

/// One round's participants, grouped. `groups[k]` trains global model `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub groups: Vec<Vec<usize>>,
}

impl RoundPlan {
    pub fn participants(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Uniform sample without replacement of `round(fraction * total)` clients,
/// returned in ascending order.
pub fn sample_participants(
    total_clients: usize,
    fraction: f64,
    round: usize,
    seed: u64,
    min_count: usize,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("participation {fraction} not in (0, 1]")));
    }
    let count = ((fraction * total_clients as f64).round() as usize).min(total_clients);
    if count < min_count.max(1) {
        return Err(Error::TooFewParticipants { got: count, groups: min_count });
    }
    let mut rng = rng_for(seed, "participants", &[round as u64]);
    let mut chosen = index::sample(&mut rng, total_clients, count).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Seeded shuffle, then `k` contiguous chunks; the first `len % k` groups
/// take one extra member.
pub fn assign_groups(participants: &[usize], k: usize, round: usize, seed: u64) -> Result<RoundPlan> {
    if k == 0 {
        return Err(Error::InvalidArgument("number of groups must be positive".into()));
    }
    if participants.len() < k {
        return Err(Error::TooFewParticipants { got: participants.len(), groups: k });
    }
    let mut order = participants.to_vec();
    order.shuffle(&mut rng_for(seed, "groups", &[round as u64]));
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let size = base + usize::from(g < extra);
        groups.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(RoundPlan { round, groups })
}

/// Averaged weights of one group and the data volume behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAggregate {
    pub weights: ParameterVector,
    pub total_samples: usize,
}

/// Sample-weighted mean of the client weights. Summation runs in ascending
/// client id order with pairwise summation, so the output does not depend on
/// the order of `results`.
pub fn group_average(results: &[LocalResult]) -> Result<GroupAggregate> {
    let first = results.first().ok_or(Error::ZeroSamples)?;
    let dim = first.weights.len();
    if let Some(bad) = results.iter().find(|r| r.weights.len() != dim) {
        return Err(Error::LengthMismatch { expected: dim, actual: bad.weights.len() });
    }
    let total: usize = results.iter().map(|r| r.sample_count).sum();
    if total == 0 {
        return Err(Error::ZeroSamples);
    }
    let mut ordered: Vec<&LocalResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.client_id);
    // the mean of identical vectors is that vector, bit for bit
    if ordered.iter().all(|r| r.weights == ordered[0].weights) {
        return Ok(GroupAggregate { weights: ordered[0].weights.clone(), total_samples: total });
    }
    let coefs: Vec<f64> = ordered.iter().map(|r| r.sample_count as f64 / total as f64).collect();
    let mut terms = vec![0.0; ordered.len()];
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        for (t, (r, c)) in terms.iter_mut().zip(ordered.iter().zip(&coefs)) {
            *t = c * r.weights.as_slice()[j];
        }
        out.push(pairwise_sum(&terms));
    }
    Ok(GroupAggregate { weights: ParameterVector::from_vec_unchecked(out), total_samples: total })
}

/// What the server learns from one group's round.
#[derive(Debug, Clone)]
pub struct GroupOutcome {
    pub aggregate: GroupAggregate,
    /// Sum of SCAFFOLD control deltas of the members, when applicable.
    pub control_delta_sum: Option<Vec<f64>>,
}

pub struct GroupJob<'a> {
    pub spec: &'a NetworkSpec,
    pub init: &'a ParameterVector,
    pub local: &'a LocalConfig,
    pub server_control: Option<&'a ParameterVector>,
    pub seed: u64,
    pub parallel: bool,
}

fn run_members(job: &GroupJob, mut members: Vec<&mut ClientState>) -> Result<Vec<LocalResult>> {
    let train = |c: &mut &mut ClientState| local_train(job.spec, job.init, c, job.local, job.server_control, job.seed);
    let mut results = if job.parallel {
        members.par_iter_mut().map(train).collect::<Result<Vec<_>>>()?
    } else {
        members.iter_mut().map(train).collect::<Result<Vec<_>>>()?
    };
    results.sort_by_key(|r| r.client_id);
    Ok(results)
}

fn summarize(results: &[LocalResult]) -> Result<GroupOutcome> {
    let aggregate = group_average(results)?;
    let mut control_delta_sum: Option<Vec<f64>> = None;
    for r in results {
        if let Some(delta) = &r.delta_control {
            let acc = control_delta_sum.get_or_insert_with(|| vec![0.0; delta.len()]);
            for (a, d) in acc.iter_mut().zip(delta.as_slice()) {
                *a += d;
            }
        }
    }
    Ok(GroupOutcome { aggregate, control_delta_sum })
}

/// Trains the given clients from `job.init` and returns their aggregate only.
pub fn train_group(job: &GroupJob, members: Vec<&mut ClientState>) -> Result<GroupOutcome> {
    summarize(&run_members(job, members)?)
}

/// Like [`train_group`], additionally releasing each client's trained weights
/// (ascending client id). Only client-ensemble methods use this path.
pub fn train_group_releasing_clients(
    job: &GroupJob,
    members: Vec<&mut ClientState>,
) -> Result<(GroupOutcome, Vec<(usize, ParameterVector)>)> {
    let results = run_members(job, members)?;
    let outcome = summarize(&results)?;
    let released = results.into_iter().map(|r| (r.client_id, r.weights)).collect();
    Ok((outcome, released))
}

/// Mutable references to the clients listed in `ids`, in `ids` order.
pub fn select_clients<'c>(clients: &'c mut [ClientState], ids: &[usize]) -> Vec<&'c mut ClientState> {
    let mut slots: Vec<Option<&'c mut ClientState>> = clients.iter_mut().map(Some).collect();
    ids.iter().map(|&id| slots[id].take().expect("client ids are distinct and in range")).collect()
}

/// Disjoint mutable selections, one per group of `plan`.
pub fn select_groups<'c>(clients: &'c mut [ClientState], plan: &RoundPlan) -> Vec<Vec<&'c mut ClientState>> {
    let mut slots: Vec<Option<&'c mut ClientState>> = clients.iter_mut().map(Some).collect();
    plan.groups
        .iter()
        .map(|g| g.iter().map(|&id| slots[id].take().expect("client ids are distinct and in range")).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result(id: usize, n: usize, w: Vec<f64>) -> LocalResult {
        LocalResult {
            client_id: id,
            sample_count: n,
            weights: ParameterVector::new(w).unwrap(),
            delta_control: None,
        }
    }

    #[test]
    fn participant_counts() {
        assert_eq!(sample_participants(20, 1.0, 3, 1, 4).unwrap(), (0..20).collect::<Vec<_>>());
        let p = sample_participants(20, 0.4, 3, 1, 4).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p, sample_participants(20, 0.4, 3, 1, 4).unwrap());
        assert_ne!(p, sample_participants(20, 0.4, 4, 1, 4).unwrap());
        assert!(matches!(sample_participants(20, 0.1, 3, 1, 4), Err(Error::TooFewParticipants { got: 2, groups: 4 })));
    }

    #[test]
    fn group_sizes() {
        let sizes = |n: usize, k: usize| -> Vec<usize> {
            let p: Vec<usize> = (0..n).collect();
            assign_groups(&p, k, 1, 9).unwrap().groups.iter().map(Vec::len).collect()
        };
        assert_eq!(sizes(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(sizes(8, 3), vec![3, 3, 2]);
        assert_eq!(sizes(14, 4), vec![4, 4, 3, 3]);
        assert!(assign_groups(&[1, 2], 0, 1, 9).is_err());
        assert!(assign_groups(&[1, 2], 3, 1, 9).is_err());
    }

    #[test]
    fn averaging_cases() {
        let single = group_average(&[result(3, 5, vec![0.1, -7.25])]).unwrap();
        assert_eq!(single.weights.as_slice(), &[0.1, -7.25]);
        let two = group_average(&[result(0, 1, vec![0.0]), result(1, 3, vec![4.0])]).unwrap();
        assert_eq!(two.weights.as_slice(), &[3.0]);
        assert_eq!(two.total_samples, 4);
        let same = vec![0.1, 0.2, 0.3];
        let equal = group_average(&[result(0, 1, same.clone()), result(1, 1, same.clone()), result(2, 1, same.clone())]).unwrap();
        assert_eq!(equal.weights.as_slice(), same.as_slice());
        assert!(matches!(group_average(&[]), Err(Error::ZeroSamples)));
        assert!(matches!(group_average(&[result(0, 0, vec![1.0])]), Err(Error::ZeroSamples)));
    }

    #[test]
    fn averaging_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let results: Vec<LocalResult> = (0..5)
            .map(|id| result(id, rng.random_range(1..50), (0..30).map(|_| rng.random_range(-3.0..3.0)).collect()))
            .collect();
        let got = group_average(&results).unwrap();
        let total: usize = results.iter().map(|r| r.sample_count).sum();
        for j in 0..30 {
            let mut acc = 0.0;
            for r in &results {
                acc += r.sample_count as f64 * r.weights.as_slice()[j];
            }
            assert!((got.weights.as_slice()[j] - acc / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn reshuffling_spreads_clients_over_slots() {
        // full participation, 8 clients, 4 slots of 2, 1000 rounds
        let participants: Vec<usize> = (0..8).collect();
        let mut counts = vec![[0usize; 4]; 8];
        for round in 1..=1000 {
            let plan = assign_groups(&participants, 4, round, 77).unwrap();
            let mut seen = [false; 8];
            for (k, g) in plan.groups.iter().enumerate() {
                for &c in g {
                    assert!(!seen[c]);
                    seen[c] = true;
                    counts[c][k] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
        // chi-square, 3 degrees of freedom, critical value at p = 0.01
        for per_slot in counts {
            let chi: f64 = per_slot.iter().map(|&o| (o as f64 - 250.0).powi(2) / 250.0).sum();
            assert!(chi < 11.345, "{per_slot:?} chi2 = {chi}");
        }
    }

    proptest! {
        #[test]
        fn average_is_permutation_invariant(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut results: Vec<LocalResult> = (0..n)
                .map(|id| result(id * 3, rng.random_range(1..100), (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()))
                .collect();
            let a = group_average(&results).unwrap();
            results.shuffle(&mut rng);
            let b = group_average(&results).unwrap();
            prop_assert!(a.weights.as_slice().iter().zip(b.weights.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn groups_partition_participants(seed in any::<u64>(), n in 1usize..40, k in 1usize..8) {
            prop_assume!(k <= n);
            let p: Vec<usize> = (100..100 + n).collect();
            let plan = assign_groups(&p, k, 2, seed).unwrap();
            let mut all: Vec<usize> = plan.groups.concat();
            all.sort_unstable();
            prop_assert_eq!(all, p);
            let sizes: Vec<usize> = plan.groups.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
