//! Core library of the safl federated-learning simulator.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`] — flat parameter vectors and exact, order-fixed vector math
//! - [`model`] — softmax classifiers, gradients, and local SGD
//! - [`data`] — datasets, non-IID partitioning, and poison shard construction
//! - [`aggregation`] — FedAvg, Krum/Multi-Krum, FoolsGold, and the sybil-grouping
//!   aggregator with fixed or decaying cosine-distance thresholds
//! - [`simulator`] — the round loop tying clients, adversaries, and aggregation together
//! - [`metrics`] — attack success and poisoning-rate measurements
//!
//! Everything is deterministic: a configuration plus a master seed fixes every
//! dataset row, every batch, every aggregation decision, and therefore every output
//! byte.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod simulator;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Identifies one participant in a run. Ids are dense and stable: honest clients
/// come first, sybils after, in declaration order.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClientId(pub usize);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
