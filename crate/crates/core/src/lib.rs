//! Desk-scale federated learning simulator.
//!
//! The crate implements weight-averaging federated training (FedAvg, FedProx,
//! SCAFFOLD), ensemble distillation over client models (FedDF), and FedSDD:
//! `K` global models trained by reshuffled client groups, a temporal ensemble
//! of their aggregated checkpoints as teacher, and distillation into the main
//! global model only. A discrete-event round scheduler quantifies the
//! server/client parallelism this structure allows.
//!
//! Module map:
//!
//! * [`nn`] dense networks over flat parameter vectors with exact gradients
//! * [`data`] synthetic tasks, Dirichlet partitioning, the binary dataset format
//! * [`local`] client trainers
//! * [`aggregation`] round planning and group averaging behind the server boundary
//! * [`distill`] checkpoint rings, ensemble teachers and the KD loop
//! * [`orchestrator`] end-to-end training loops and evaluation
//! * [`sched`] round scheduling simulator

pub mod aggregation;
pub mod data;
pub mod distill;
pub mod error;
pub mod local;
pub mod nn;
pub mod orchestrator;
pub mod sched;
pub mod seed;
pub(crate) mod sum;

pub use error::{Error, Result};
