use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, make_synthetic, split_labeled, split_server_pool, LabeledDataset, PartitionSpec, UnlabeledPool};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::local::{ClientState, LocalConfig, TrainerKind};
use crate::nn::{Activation, NetworkSpec};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "scaffold")]
    Scaffold,
    #[serde(rename = "feddf")]
    FedDf,
    #[serde(rename = "fedsdd")]
    FedSdd,
    /// Every slot distilled towards the shared teacher each round.
    #[serde(rename = "ablation_basic")]
    AblationBasic,
    /// Basic distillation, skipped for the first `warmup_rounds` rounds.
    #[serde(rename = "ablation_warmup")]
    AblationWarmup,
    /// Main-only distillation; same loop as `fedsdd`.
    #[serde(rename = "ablation_diversity")]
    AblationDiversity,
    /// No distillation; logs every ensemble construction strategy.
    #[serde(rename = "ensemble_eval")]
    EnsembleEval,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::FedAvg,
        Method::FedProx,
        Method::Scaffold,
        Method::FedDf,
        Method::FedSdd,
        Method::AblationBasic,
        Method::AblationWarmup,
        Method::AblationDiversity,
        Method::EnsembleEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::Scaffold => "scaffold",
            Method::FedDf => "feddf",
            Method::FedSdd => "fedsdd",
            Method::AblationBasic => "ablation_basic",
            Method::AblationWarmup => "ablation_warmup",
            Method::AblationDiversity => "ablation_diversity",
            Method::EnsembleEval => "ensemble_eval",
        }
    }

    /// Baselines train one global model.
    pub fn single_model(self) -> bool {
        matches!(self, Method::FedAvg | Method::FedProx | Method::Scaffold | Method::FedDf)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which ensemble the `ensemble_eval` method reports as its headline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleStrategy {
    /// Logit average of every participating client model.
    Clients,
    /// Temporal ensemble of aggregated checkpoints.
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64], activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    /// Samples generated per class before any split.
    pub per_class: usize,
    pub separation: f64,
    pub test_fraction: f64,
    /// Share of the remaining data that becomes the unlabeled server pool.
    pub pool_fraction: f64,
    /// Share of the remaining data held at the server as labeled validation
    /// data (FedDF drop-worst / early stopping). 0 disables it.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            per_class: 500,
            separation: 3.0,
            test_fraction: 0.2,
            pool_fraction: 0.2,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedDfConfig {
    pub drop_worst: bool,
    pub early_stop: bool,
    pub patience: usize,
    /// Distillation steps between validation checks.
    pub eval_interval: usize,
}

impl Default for FedDfConfig {
    fn default() -> Self {
        Self { drop_worst: false, early_stop: false, patience: 5, eval_interval: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Training rounds `T`.
    pub rounds: usize,
    /// Global models `K`.
    pub global_models: usize,
    /// Checkpoint depth `R` of the temporal ensemble.
    pub checkpoints: usize,
    pub total_clients: usize,
    pub participation: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Start every global model from the same weights.
    pub shared_init: bool,
    /// Store the distilled main model in the checkpoint ring instead of its
    /// pre-distillation aggregate.
    pub checkpoint_distilled_main: bool,
    pub warmup_rounds: usize,
    pub ensemble_strategy: EnsembleStrategy,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub local: LocalConfig,
    pub distill: DistillConfig,
    pub feddf: FedDfConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::FedSdd,
            rounds: 30,
            global_models: 4,
            checkpoints: 2,
            total_clients: 20,
            participation: 0.4,
            alpha: 1.0,
            seed: 0,
            shared_init: false,
            checkpoint_distilled_main: false,
            warmup_rounds: 0,
            ensemble_strategy: EnsembleStrategy::Aggregated,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            local: LocalConfig::default(),
            distill: DistillConfig::default(),
            feddf: FedDfConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn network(&self) -> Result<NetworkSpec> {
        let mut sizes = vec![self.data.dim];
        sizes.extend(&self.model.hidden);
        sizes.push(self.data.classes);
        NetworkSpec::new(sizes, self.model.activation)
    }

    /// `K` actually used; baselines always run one model.
    pub fn models(&self) -> usize {
        if self.method.single_model() {
            1
        } else {
            self.global_models
        }
    }

    pub fn trainer(&self) -> TrainerKind {
        match self.method {
            Method::FedAvg => TrainerKind::FedAvg,
            Method::FedProx => TrainerKind::FedProx,
            Method::Scaffold => TrainerKind::Scaffold,
            _ => self.local.trainer,
        }
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig { trainer: self.trainer(), ..self.local.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.global_models == 0 || self.checkpoints == 0 {
            return bad("global_models and checkpoints must be >= 1".into());
        }
        if self.total_clients == 0 {
            return bad("total_clients must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation {} not in (0, 1]", self.participation));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.method == Method::FedDf
            && (self.feddf.drop_worst || self.feddf.early_stop)
            && self.data.validation_fraction <= 0.0
        {
            return bad("feddf drop_worst/early_stop need data.validation_fraction > 0".into());
        }
        self.local.validate()?;
        self.distill.validate()?;
        self.network()?;
        Ok(())
    }
}

/// Everything a run trains and evaluates on. Derived from the seed alone, so
/// methods sharing a seed share the partition.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub pool: UnlabeledPool,
    pub validation: Option<LabeledDataset>,
    pub partition: PartitionSpec,
}

impl Datasets {
    pub fn clients(&self) -> Result<Vec<ClientState>> {
        self.partition
            .client_indices
            .iter()
            .enumerate()
            .map(|(id, idx)| Ok(ClientState::new(id, self.train.subset(idx)?)))
            .collect()
    }
}

pub fn prepare_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let seed = cfg.seed;
    let full = make_synthetic(d.classes, d.dim, d.per_class, d.separation, derive_seed(seed, "data", &[]))?;
    let (rest, test) = split_labeled(&full, d.test_fraction, derive_seed(seed, "test-split", &[]))?;
    let (rest, pool) = split_server_pool(&rest, d.pool_fraction, derive_seed(seed, "pool-split", &[]))?;
    let (train, validation) = if d.validation_fraction > 0.0 {
        let (train, val) = split_labeled(&rest, d.validation_fraction, derive_seed(seed, "validation-split", &[]))?;
        (train, Some(val))
    } else {
        (rest, None)
    };
    let partition = dirichlet_partition(&train, cfg.total_clients, cfg.alpha, derive_seed(seed, "partition", &[]))?;
    Ok(Datasets { train, test, pool, validation, partition })
}
