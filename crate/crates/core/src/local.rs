//! Client-side trainers.
//!
//! All three trainers run `epochs` passes of shuffled mini-batch SGD on the
//! cross-entropy loss. FedProx adds `mu * (w - init)` to every gradient;
//! SCAFFOLD corrects every gradient by `c - c_i` and refreshes `c_i` from the
//! weight displacement afterwards.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{ce_loss_grad, gather_rows, sgd_step, Batch, NetworkSpec, ParameterVector};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    FedAvg,
    FedProx,
    Scaffold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mu: f64,
    pub trainer: TrainerKind,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, lr: 0.1, mu: 0.001, trainer: TrainerKind::FedAvg }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("local batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("local lr must be positive, got {}", self.lr)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu must be non-negative, got {}", self.mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    data: LabeledDataset,
    control_variate: Option<ParameterVector>,
}

impl ClientState {
    pub fn new(client_id: usize, data: LabeledDataset) -> Self {
        Self { client_id, data, control_variate: None }
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    pub fn control_variate(&self) -> Option<&ParameterVector> {
        self.control_variate.as_ref()
    }
}

/// Output of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub client_id: usize,
    pub sample_count: usize,
    pub(crate) weights: ParameterVector,
    pub delta_control: Option<ParameterVector>,
}

impl LocalResult {
    /// Client-side view of the trained weights.
    pub fn weights(&self) -> &ParameterVector {
        &self.weights
    }
}

pub fn local_train(
    spec: &NetworkSpec,
    init: &ParameterVector,
    client: &mut ClientState,
    cfg: &LocalConfig,
    server_control: Option<&ParameterVector>,
    seed: u64,
) -> Result<LocalResult> {
    spec.check_params(init)?;
    cfg.validate()?;
    let dim = init.len();
    let correction: Option<Vec<f64>> = match cfg.trainer {
        TrainerKind::Scaffold => {
            let c = server_control.ok_or_else(|| {
                Error::InvalidArgument("scaffold needs the server control variate".into())
            })?;
            if c.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, actual: c.len() });
            }
            let ci = client.control_variate.get_or_insert_with(|| ParameterVector::zeros(dim));
            if ci.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, actual: ci.len() });
            }
            Some(c.as_slice().iter().zip(ci.as_slice()).map(|(c, ci)| c - ci).collect())
        }
        _ => None,
    };
    let prox_mu = match cfg.trainer {
        TrainerKind::FedProx if cfg.mu > 0.0 => Some(cfg.mu),
        _ => None,
    };

    let n = client.data.len();
    let mut rng = rng_for(seed, "local", &[client.client_id as u64]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = init.clone();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = gather_rows(client.data.inputs(), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| client.data.labels()[i]).collect();
            let mut lg = ce_loss_grad(spec, &w, &Batch::labeled(inputs.view(), &labels))?;
            if !lg.loss.is_finite() {
                return Err(Error::ClientDivergence { client: client.client_id, step });
            }
            if let Some(mu) = prox_mu {
                for ((g, x), x0) in lg.grad.iter_mut().zip(w.as_slice()).zip(init.as_slice()) {
                    *g += mu * (x - x0);
                }
            }
            if let Some(corr) = &correction {
                for (g, d) in lg.grad.iter_mut().zip(corr) {
                    *g += d;
                }
            }
            w = sgd_step(&w, &lg.grad, cfg.lr)
                .map_err(|_| Error::ClientDivergence { client: client.client_id, step })?;
            step += 1;
        }
    }

    let delta_control = match (cfg.trainer, server_control) {
        (TrainerKind::Scaffold, Some(c)) => {
            let ci = client.control_variate.as_mut().expect("initialized above");
            let old = ci.clone();
            if step > 0 {
                let scale = 1.0 / (cfg.lr * step as f64);
                for (((ci, c), x0), x) in ci
                    .as_mut_slice()
                    .iter_mut()
                    .zip(c.as_slice())
                    .zip(init.as_slice())
                    .zip(w.as_slice())
                {
                    *ci = *ci - c + (x0 - x) * scale;
                }
            }
            let delta = ci.as_slice().iter().zip(old.as_slice()).map(|(a, b)| a - b).collect();
            Some(ParameterVector::new(delta)?)
        }
        _ => None,
    };

    Ok(LocalResult { client_id: client.client_id, sample_count: n, weights: w, delta_control })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::{init_weights, Activation};

    fn setup() -> (NetworkSpec, ParameterVector, ClientState) {
        let spec = NetworkSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
        let init = init_weights(&spec, 1);
        let data = make_synthetic(3, 4, 20, 2.0, 2).unwrap();
        (spec, init, ClientState::new(7, data))
    }

    fn cfg(trainer: TrainerKind) -> LocalConfig {
        LocalConfig { epochs: 2, batch_size: 16, lr: 0.1, mu: 0.0, trainer }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (spec, init, mut client) = setup();
        let zero = ParameterVector::zeros(init.len());
        for kind in [TrainerKind::FedAvg, TrainerKind::FedProx, TrainerKind::Scaffold] {
            let c = LocalConfig { epochs: 0, ..cfg(kind) };
            let out = local_train(&spec, &init, &mut client, &c, Some(&zero), 3).unwrap();
            assert_eq!(out.weights, init);
            assert_eq!(out.sample_count, 60);
        }
    }

    #[test]
    fn full_batch_single_step_matches_oracle() {
        let (spec, init, mut client) = setup();
        let c = LocalConfig { epochs: 1, batch_size: 1000, ..cfg(TrainerKind::FedAvg) };
        let out = local_train(&spec, &init, &mut client, &c, None, 3).unwrap();
        // one step over the whole (permuted) set; the mean gradient is order
        // independent up to summation order, so compare to tolerance
        let data = client.data();
        let lg = ce_loss_grad(&spec, &init, &Batch::labeled(data.inputs(), data.labels())).unwrap();
        let expected: Vec<f64> = init.as_slice().iter().zip(&lg.grad).map(|(w, g)| w - 0.1 * g).collect();
        for (a, b) in out.weights.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn prox_zero_mu_is_fedavg() {
        let (spec, init, mut client) = setup();
        let a = local_train(&spec, &init, &mut client, &cfg(TrainerKind::FedAvg), None, 3).unwrap();
        let b = local_train(&spec, &init, &mut client, &cfg(TrainerKind::FedProx), None, 3).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn large_mu_stays_close() {
        let (spec, init, mut client) = setup();
        let prox = LocalConfig { mu: 1e6, lr: 1e-7, ..cfg(TrainerKind::FedProx) };
        let fedavg = LocalConfig { lr: 1e-7, ..cfg(TrainerKind::FedAvg) };
        let p = local_train(&spec, &init, &mut client, &prox, None, 3).unwrap();
        let f = local_train(&spec, &init, &mut client, &fedavg, None, 3).unwrap();
        assert!(p.weights.l2_distance(&init) < f.weights.l2_distance(&init));
    }

    #[test]
    fn divergence_is_reported() {
        let (spec, init, mut client) = setup();
        let wild = LocalConfig { mu: 1e6, epochs: 100, ..cfg(TrainerKind::FedProx) };
        let err = local_train(&spec, &init, &mut client, &wild, None, 3).unwrap_err();
        assert!(matches!(err, Error::ClientDivergence { client: 7, .. }), "{err:?}");
    }

    #[test]
    fn scaffold_first_round_is_fedavg() {
        let (spec, init, client) = setup();
        let mut c1 = client.clone();
        let mut c2 = client;
        let zero = ParameterVector::zeros(init.len());
        let a = local_train(&spec, &init, &mut c1, &cfg(TrainerKind::FedAvg), None, 3).unwrap();
        let b = local_train(&spec, &init, &mut c2, &cfg(TrainerKind::Scaffold), Some(&zero), 3).unwrap();
        assert_eq!(a.weights, b.weights);
        // option II: c_i = (init - w) / (lr * steps), steps = 2 epochs * 4 batches
        let ci = c2.control_variate().unwrap();
        for ((ci, x0), x) in ci.as_slice().iter().zip(init.as_slice()).zip(b.weights.as_slice()) {
            assert!((ci - (x0 - x) / (0.1 * 8.0)).abs() < 1e-12);
        }
        assert_eq!(b.delta_control.as_ref().unwrap(), ci);
        assert!(local_train(&spec, &init, &mut c2, &cfg(TrainerKind::Scaffold), None, 3).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let (spec, init, mut client) = setup();
        let a = local_train(&spec, &init, &mut client, &cfg(TrainerKind::FedAvg), None, 3).unwrap();
        let b = local_train(&spec, &init, &mut client, &cfg(TrainerKind::FedAvg), None, 3).unwrap();
        let c = local_train(&spec, &init, &mut client, &cfg(TrainerKind::FedAvg), None, 4).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_ne!(a.weights, c.weights);
    }
}
