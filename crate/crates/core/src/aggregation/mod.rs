//! Everything that combines parameter vectors.

mod compress;
mod consensus;
mod hierarchy;
mod mixing;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::ParameterVector;
use crate::netmodel::NetError;
use crate::topology::{Cluster, ClusterId, NodeId};

pub use compress::{compress, CompressionConfig};
pub use consensus::{consensus_aggregate, consensus_round};
pub use hierarchy::{
    aggregate_cluster, hierarchical_aggregate, AggregationPlan, ClusterInput, ClusterResult,
    ClusterSettings, Transfer,
};
pub use mixing::{build_mixing_matrix, MixingMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("{vectors} vectors but {weights} weights")]
    CountMismatch { vectors: usize, weights: usize },
    #[error("weight {index} is negative or not finite")]
    NegativeWeight { index: usize },
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error("vector length {found} differs from {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("{states} states for a mixing matrix of order {order}")]
    DimensionMismatch { states: usize, order: usize },
    #[error("consensus needs at least one round")]
    ZeroRounds,
    #[error("cluster {0} is not in consensus mode")]
    NotConsensus(ClusterId),
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("top-k of {k} exceeds vector length {len}")]
    TopkTooLarge { k: usize, len: usize },
    #[error("invalid compression config: {0}")]
    InvalidCompression(String),
    #[error("no parameters supplied for node {0}")]
    MissingInput(NodeId),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// `sum(w_i * v_i) / sum(w_i)`, computed with normalized weights so that a
/// single input is returned bit-for-bit.
pub fn weighted_average(
    vectors: &[ParameterVector],
    weights: &[f64],
) -> Result<ParameterVector, AggregationError> {
    if vectors.is_empty() {
        return Err(AggregationError::Empty);
    }
    if vectors.len() != weights.len() {
        return Err(AggregationError::CountMismatch {
            vectors: vectors.len(),
            weights: weights.len(),
        });
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(AggregationError::NegativeWeight { index });
    }
    let len = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(AggregationError::LengthMismatch {
            expected: len,
            found: v.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(AggregationError::ZeroWeightSum);
    }
    let mut out = vec![0.0; len];
    for (v, w) in vectors.iter().zip(weights) {
        let share = w / total;
        if share == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += share * x;
        }
    }
    Ok(ParameterVector::from_vec(out))
}

/// Member with the most residual energy; ties go to the lowest id. Members
/// missing from `residual_energy` count as having none.
pub fn select_uploader(
    cluster: &Cluster,
    residual_energy: &BTreeMap<NodeId, f64>,
) -> Result<NodeId, AggregationError> {
    let mut best: Option<(NodeId, f64)> = None;
    for &m in &cluster.members {
        let e = residual_energy.get(&m).copied().unwrap_or(0.0);
        match best {
            Some((_, be)) if e <= be => {}
            _ => best = Some((m, e)),
        }
    }
    best.map(|(m, _)| m).ok_or(AggregationError::EmptyCluster)
}
