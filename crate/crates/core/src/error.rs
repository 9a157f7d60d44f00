use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("parameter vector has {actual} entries, network expects {expected}")]
    ParamLength { expected: usize, actual: usize },

    #[error("layer {layer}: expected input width {expected}, got {actual}")]
    DimensionMismatch { layer: usize, expected: usize, actual: usize },

    #[error("softmax of an empty vector")]
    EmptyLogits,

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("batch carries no labels")]
    MissingLabels,

    #[error("sample {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("teacher row {row} sums to {sum}, expected 1")]
    TeacherNotNormalized { row: usize, sum: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("client {client} diverged at local step {step}")]
    ClientDivergence { client: usize, step: usize },

    #[error("distillation diverged at step {step}")]
    DistillDivergence { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} clients requested but only {1} samples available")]
    TooManyClients(usize, usize),

    #[error("{got} participants cannot populate {groups} groups")]
    TooFewParticipants { got: usize, groups: usize },

    #[error("group has zero total samples")]
    ZeroSamples,

    #[error("checkpoint ring for model {0} is empty")]
    EmptyCheckpointRing(usize),

    #[error("dataset file: {0}")]
    Format(#[from] FormatError),

    #[error("infeasible schedule: {0}")]
    Infeasible(String),

    #[error("round {round}, {phase}: {source}")]
    Round {
        round: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_round(self, round: usize, phase: &'static str) -> Self {
        Error::Round { round, phase, source: Box::new(self) }
    }

    /// Strips round/phase context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Round { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Failures decoding the binary dataset format.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated: header promises {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload has {actual} bytes but header declares {expected}")]
    PayloadMismatch { expected: usize, actual: usize },
    #[error("sample {index}: label {label} >= class count {classes}")]
    LabelOutOfRange { index: usize, label: u16, classes: u32 },
    #[error("non-finite feature at sample {0}")]
    NonFiniteFeature(usize),
    #[error("file holds an unlabeled pool, expected a labeled dataset")]
    Unlabeled,
    #[error("file holds a labeled dataset, expected an unlabeled pool")]
    Labeled,
    #[error("empty dataset")]
    Empty,
}
