//! Quantitative outcomes: attack success rate, poisoning-rate diagnostics.
//!
//! The attack success rate is the fraction of source-class test examples the
//! model classifies as the attacker's target class; protection rate is its
//! complement. Estimated vs true poisoning rate compares what the grouping
//! aggregator flagged against the actual sybil share of the round.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationDetail;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict, ModelState};

/// Final attack outcome for one (adversary, target) pair, with the full per-round
/// trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub adversary: usize,
    pub source_class: usize,
    pub target_class: usize,
    /// Attack success rate on the final model.
    pub rate: f64,
    /// One rate per completed round, in round order.
    pub series: Vec<f64>,
}

/// Fraction of source-class test examples predicted as the target class.
pub fn attack_success_rate(
    m: &ModelState,
    test: &Dataset,
    source_class: usize,
    target_class: usize,
) -> Result<f64> {
    if source_class >= test.num_classes() || target_class >= test.num_classes() {
        return Err(Error::config(format!(
            "attack classes must be < {} (source {source_class}, target {target_class})",
            test.num_classes()
        )));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for i in 0..test.len() {
        if test.label(i) == source_class {
            total += 1;
            if predict(m, test.features(i))? == target_class {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::config(format!(
            "test set has no examples of source class {source_class}"
        )));
    }
    Ok(hits as f64 / total as f64)
}

/// The share of submitting clients the grouping aggregator placed inside some
/// group this round — its working estimate of who is colluding. `None` for
/// aggregators that don't group (reported as a not-applicable marker downstream).
pub fn estimated_poisoning_rate(
    detail: &AggregationDetail,
    submitting_clients: usize,
) -> Option<f64> {
    match detail {
        AggregationDetail::Safl { partition } => {
            if submitting_clients == 0 {
                return Some(0.0);
            }
            Some(partition.grouped_count() as f64 / submitting_clients as f64)
        }
        _ => None,
    }
}

/// The actual sybil share among the round's active clients.
pub fn true_poisoning_rate(active_sybils: usize, active_clients: usize) -> f64 {
    if active_clients == 0 {
        return 0.0;
    }
    active_sybils as f64 / active_clients as f64
}
