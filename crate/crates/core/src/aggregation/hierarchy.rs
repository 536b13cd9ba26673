use std::collections::BTreeMap;

use super::{compress, consensus_aggregate, select_uploader, weighted_average};
use super::{AggregationError, CompressionConfig};
use crate::model::ParameterVector;
use crate::netmodel::{apply_channel_noise, CostModel, Event, Ledger, LinkKind, Phase};
use crate::rng::derive_seed;
use crate::topology::{AggregationMode, Cluster, ClusterId, FogTree, NodeId};

/// Per-cluster aggregation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSettings {
    pub consensus_rounds: usize,
    /// Noise on each received D2D message.
    pub d2d_noise_sigma: f64,
    /// Noise on vertical uploads.
    pub uplink_noise_sigma: f64,
    pub compression: CompressionConfig,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            consensus_rounds: 10,
            d2d_noise_sigma: 0.0,
            uplink_noise_sigma: 0.0,
            compression: CompressionConfig::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterInput {
    pub node: NodeId,
    pub params: ParameterVector,
    /// Aggregation weight; zero-weight members only relay in consensus mode.
    pub weight: f64,
}

/// A parameter transfer produced by aggregation, not yet priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub link: LinkKind,
    pub src: NodeId,
    pub dst: NodeId,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// What the parent receives.
    pub aggregate: ParameterVector,
    pub weight: f64,
    pub uploader: Option<NodeId>,
    /// Post-consensus state of every member, in member order.
    pub member_states: Vec<(NodeId, ParameterVector)>,
    pub transfers: Vec<Transfer>,
    /// Distance between the uploaded consensus estimate and the exact
    /// weighted mean of the inputs.
    pub consensus_error: Option<f64>,
    pub d2d_messages: usize,
}

fn upload(
    params: &ParameterVector,
    settings: &ClusterSettings,
    src: NodeId,
    dst: NodeId,
    seed: u64,
) -> Result<(ParameterVector, Transfer), AggregationError> {
    let (mut sent, count) = compress(params, &settings.compression)?;
    if settings.uplink_noise_sigma > 0.0 {
        sent = apply_channel_noise(
            &sent,
            settings.uplink_noise_sigma,
            derive_seed(seed, &[src.0 as u64]),
        )?;
    }
    Ok((
        sent,
        Transfer {
            link: LinkKind::Uplink,
            src,
            dst,
            params: count as u64,
        },
    ))
}

/// Aggregates one cluster into the vector its parent receives.
///
/// Server-side: every member with positive weight uploads and the parent
/// takes the weighted average. Consensus: members run average consensus on
/// weight-scaled states `x_i * m * w_i / W`, whose plain mean is the weighted
/// mean, and the member with the most residual energy uploads its estimate.
/// Consensus inputs must cover every member.
pub fn aggregate_cluster(
    cluster: &Cluster,
    inputs: &[ClusterInput],
    settings: &ClusterSettings,
    residual_energy: &BTreeMap<NodeId, f64>,
    seed: u64,
) -> Result<ClusterResult, AggregationError> {
    if cluster.members.is_empty() {
        return Err(AggregationError::EmptyCluster);
    }
    let total: f64 = inputs.iter().map(|i| i.weight).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(AggregationError::ZeroWeightSum);
    }
    match cluster.mode {
        AggregationMode::ServerSide => {
            let mut received = Vec::new();
            let mut weights = Vec::new();
            let mut transfers = Vec::new();
            for input in inputs.iter().filter(|i| i.weight > 0.0) {
                let (sent, t) = upload(&input.params, settings, input.node, cluster.parent, seed)?;
                received.push(sent);
                weights.push(input.weight);
                transfers.push(t);
            }
            Ok(ClusterResult {
                aggregate: weighted_average(&received, &weights)?,
                weight: total,
                uploader: None,
                member_states: Vec::new(),
                transfers,
                consensus_error: None,
                d2d_messages: 0,
            })
        }
        AggregationMode::D2dConsensus => {
            let by_node: BTreeMap<NodeId, &ClusterInput> =
                inputs.iter().map(|i| (i.node, i)).collect();
            let m = cluster.members.len() as f64;
            let mut states = Vec::with_capacity(cluster.members.len());
            for node in &cluster.members {
                let input = by_node
                    .get(node)
                    .ok_or(AggregationError::MissingInput(*node))?;
                let scale = m * input.weight / total;
                states.push(if scale == 1.0 {
                    input.params.clone()
                } else {
                    ParameterVector::from_vec(input.params.iter().map(|x| x * scale).collect())
                });
            }
            let (finals, messages) = consensus_aggregate(
                cluster,
                &states,
                settings.consensus_rounds,
                settings.d2d_noise_sigma,
                derive_seed(seed, &[u64::MAX]),
            )?;
            let g = states[0].len() as u64;
            let mut transfers = Vec::new();
            for (i, j) in cluster.d2d.edges() {
                for (a, b) in [(i, j), (j, i)] {
                    transfers.push(Transfer {
                        link: LinkKind::D2d,
                        src: cluster.members[a],
                        dst: cluster.members[b],
                        params: settings.consensus_rounds as u64 * g,
                    });
                }
            }
            let uploader = select_uploader(cluster, residual_energy)?;
            let idx = cluster.index_of(uploader).expect("uploader is a member");
            let (sent, t) = upload(&finals[idx], settings, uploader, cluster.parent, seed)?;
            transfers.push(t);
            let params: Vec<ParameterVector> = inputs.iter().map(|i| i.params.clone()).collect();
            let weights: Vec<f64> = inputs.iter().map(|i| i.weight).collect();
            let exact = weighted_average(&params, &weights)?;
            Ok(ClusterResult {
                consensus_error: Some(finals[idx].distance(&exact)),
                aggregate: sent,
                weight: total,
                uploader: Some(uploader),
                member_states: cluster.members.iter().copied().zip(finals).collect(),
                transfers,
                d2d_messages: messages,
            })
        }
    }
}

/// Inputs to a full bottom-up pass.
#[derive(Debug, Clone, Default)]
pub struct AggregationPlan {
    pub default: ClusterSettings,
    pub overrides: BTreeMap<ClusterId, ClusterSettings>,
    pub residual_energy: BTreeMap<NodeId, f64>,
    pub seed: u64,
    pub round: u64,
    pub sample_width: u64,
}

impl AggregationPlan {
    pub fn settings(&self, cluster: ClusterId) -> &ClusterSettings {
        self.overrides.get(&cluster).unwrap_or(&self.default)
    }
}

/// Aggregates every leaf's parameters up to the root, layer by layer. Each
/// node above the leaves forwards the weighted combination of its child
/// clusters, weighted by the leaf weight beneath each. Returns the root vector
/// and the ledger of all transfers made.
pub fn hierarchical_aggregate(
    tree: &FogTree,
    leaf_params: &BTreeMap<NodeId, ParameterVector>,
    leaf_weights: &BTreeMap<NodeId, f64>,
    plan: &AggregationPlan,
    costs: &CostModel,
) -> Result<(ParameterVector, Ledger), AggregationError> {
    let mut ledger = Ledger::new(plan.sample_width);
    let mut values: BTreeMap<NodeId, (ParameterVector, f64)> = BTreeMap::new();
    for leaf in tree.leaves() {
        let params = leaf_params
            .get(&leaf)
            .ok_or(AggregationError::MissingInput(leaf))?;
        let weight = *leaf_weights
            .get(&leaf)
            .ok_or(AggregationError::MissingInput(leaf))?;
        values.insert(leaf, (params.clone(), weight));
    }
    let g = values
        .values()
        .next()
        .map(|(p, _)| p.len())
        .ok_or(AggregationError::Empty)?;
    for layer in 0..tree.layer_count() - 1 {
        let mut per_parent: BTreeMap<NodeId, (Vec<ParameterVector>, Vec<f64>)> = BTreeMap::new();
        for cluster in tree.layer_clusters(layer).filter(|c| !c.is_empty()) {
            let inputs: Vec<ClusterInput> = cluster
                .members
                .iter()
                .filter_map(|m| match values.get(m) {
                    Some((p, w)) => Some(ClusterInput {
                        node: *m,
                        params: p.clone(),
                        weight: *w,
                    }),
                    None if cluster.mode == AggregationMode::D2dConsensus => Some(ClusterInput {
                        node: *m,
                        params: ParameterVector::zeros(g),
                        weight: 0.0,
                    }),
                    None => None,
                })
                .collect();
            if inputs.iter().all(|i| i.weight <= 0.0) {
                continue;
            }
            let seed = derive_seed(plan.seed, &[plan.round, cluster.id.0 as u64]);
            let result = aggregate_cluster(
                cluster,
                &inputs,
                plan.settings(cluster.id),
                &plan.residual_energy,
                seed,
            )?;
            for t in &result.transfers {
                ledger.record(&Event::transfer(
                    plan.round,
                    Phase::Aggregate,
                    costs.link(t.link),
                    t.src,
                    t.dst,
                    t.params,
                ));
            }
            let slot = per_parent.entry(cluster.parent).or_default();
            slot.0.push(result.aggregate);
            slot.1.push(result.weight);
        }
        for (parent, (vectors, weights)) in per_parent {
            let total = weights.iter().sum();
            values.insert(parent, (weighted_average(&vectors, &weights)?, total));
        }
    }
    let root = values
        .remove(&tree.root())
        .map(|(p, _)| p)
        .ok_or(AggregationError::ZeroWeightSum)?;
    Ok((root, ledger))
}
