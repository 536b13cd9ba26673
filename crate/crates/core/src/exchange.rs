//! Moving data between devices.
//!
//! Offloading relieves an overloaded device by moving samples to a trusted
//! neighbor in its leaf cluster. Caching copies a fraction of each device's
//! shareable samples to its parent, which broadcasts the cache back to every
//! device of the cluster.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use thiserror::Error;

use crate::model::{Dataset, Sample};
use crate::netmodel::ComputeProfile;
use crate::rng;
use crate::topology::{Cluster, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExchangeError {
    #[error("offload from {0} to itself")]
    SelfTransfer(NodeId),
    #[error("no dataset for node {0}")]
    UnknownNode(NodeId),
    #[error("sample index {index} is not valid for node {node}")]
    StaleIndex { node: NodeId, index: usize },
    #[error("{src} and {dst} do not share a trust edge")]
    Untrusted { src: NodeId, dst: NodeId },
    #[error("cache held by {holder} cannot serve a cluster whose parent is {parent}")]
    WrongHolder { holder: NodeId, parent: NodeId },
    #[error("fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("offloading plans apply to leaf clusters only")]
    NotLeafCluster,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadTransfer {
    pub source: NodeId,
    pub destination: NodeId,
    /// Indices into the source's dataset as it was when planned.
    pub sample_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OffloadPlan {
    pub transfers: Vec<OffloadTransfer>,
    /// Devices still over capacity after planning.
    pub unresolved: Vec<NodeId>,
}

impl OffloadPlan {
    pub fn is_empty(&self) -> bool {
        self.transfers.is_empty()
    }

    pub fn moved_samples(&self) -> usize {
        self.transfers.iter().map(|t| t.sample_indices.len()).sum()
    }

    /// Checks that every transfer follows a trust edge of `cluster`.
    pub fn check_trust(&self, cluster: &Cluster) -> Result<(), ExchangeError> {
        for t in &self.transfers {
            if t.source == t.destination {
                return Err(ExchangeError::SelfTransfer(t.source));
            }
            if !cluster.trusted(t.source, t.destination) {
                return Err(ExchangeError::Untrusted {
                    src: t.source,
                    dst: t.destination,
                });
            }
        }
        Ok(())
    }
}

/// Whole samples a device can process per round.
pub fn capacity(profile: &ComputeProfile, deadline: f64, local_steps: usize) -> usize {
    profile.capacity(deadline, local_steps).floor().max(0.0) as usize
}

/// Greedy offloading plan for one leaf cluster.
///
/// Overloaded devices are visited in id order; each moves its excess, highest
/// indices first, to the trusted neighbor with the most slack (ties to the
/// lowest id), repeating until no overloaded device has a trusted neighbor
/// with slack.
pub fn plan_offload(
    cluster: &Cluster,
    datasets: &BTreeMap<NodeId, Dataset>,
    compute: &BTreeMap<NodeId, ComputeProfile>,
    deadline: f64,
    local_steps: usize,
) -> Result<OffloadPlan, ExchangeError> {
    if cluster.layer != 0 {
        return Err(ExchangeError::NotLeafCluster);
    }
    let members = &cluster.members;
    let mut load: BTreeMap<NodeId, usize> = members
        .iter()
        .map(|m| (*m, datasets.get(m).map_or(0, Dataset::len)))
        .collect();
    let cap: BTreeMap<NodeId, usize> = members
        .iter()
        .map(|m| {
            let c = compute
                .get(m)
                .map_or(usize::MAX, |p| capacity(p, deadline, local_steps));
            (*m, c)
        })
        .collect();
    let mut plan = OffloadPlan::default();
    loop {
        let mut progressed = false;
        for &src in members {
            if load[&src] <= cap[&src] {
                continue;
            }
            let target = members
                .iter()
                .copied()
                .filter(|&dst| cluster.trusted(src, dst) && load[&dst] < cap[&dst])
                .max_by(|a, b| {
                    let sa = cap[a] - load[a];
                    let sb = cap[b] - load[b];
                    sa.cmp(&sb).then(b.cmp(a))
                });
            let Some(dst) = target else { continue };
            let excess = load[&src] - cap[&src];
            let slack = cap[&dst] - load[&dst];
            let amount = excess.min(slack);
            let end = load[&src];
            plan.transfers.push(OffloadTransfer {
                source: src,
                destination: dst,
                sample_indices: (end - amount..end).rev().collect(),
            });
            *load.get_mut(&src).expect("member") -= amount;
            *load.get_mut(&dst).expect("member") += amount;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    plan.unresolved = members
        .iter()
        .copied()
        .filter(|m| load[m] > cap[m])
        .collect();
    Ok(plan)
}

/// Moves the planned samples. Validates the whole plan before touching any
/// dataset; receivers append samples in plan order.
pub fn execute_offload(
    datasets: &mut BTreeMap<NodeId, Dataset>,
    plan: &OffloadPlan,
) -> Result<(), ExchangeError> {
    let mut taken: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
    for t in &plan.transfers {
        if t.source == t.destination {
            return Err(ExchangeError::SelfTransfer(t.source));
        }
        let src = datasets
            .get(&t.source)
            .ok_or(ExchangeError::UnknownNode(t.source))?;
        if !datasets.contains_key(&t.destination) {
            return Err(ExchangeError::UnknownNode(t.destination));
        }
        let used = taken.entry(t.source).or_default();
        for &i in &t.sample_indices {
            if i >= src.len() || !used.insert(i) {
                return Err(ExchangeError::StaleIndex {
                    node: t.source,
                    index: i,
                });
            }
        }
    }
    let moved: Vec<(NodeId, Vec<Sample>)> = plan
        .transfers
        .iter()
        .map(|t| {
            let src = &datasets[&t.source];
            let samples = t
                .sample_indices
                .iter()
                .map(|&i| src.samples[i].clone())
                .collect();
            (t.destination, samples)
        })
        .collect();
    for (node, indices) in &taken {
        let ds = datasets.get_mut(node).expect("validated");
        let mut i = 0;
        ds.samples.retain(|_| {
            let keep = !indices.contains(&i);
            i += 1;
            keep
        });
    }
    for (dst, samples) in moved {
        datasets
            .get_mut(&dst)
            .expect("validated")
            .samples
            .extend(samples);
    }
    Ok(())
}

/// Shareable samples held at a layer-1 node. Everything in here has been
/// released by its owner and may be copied freely.
#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    pub holder: NodeId,
    pub samples: Vec<Sample>,
}

impl Cache {
    pub fn new(holder: NodeId) -> Self {
        Self {
            holder,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Copies `floor(fraction * len)` uniformly chosen samples for upload to the
/// parent's cache. The device keeps all of its samples.
pub fn cache_upload(
    device: NodeId,
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<Vec<Sample>, ExchangeError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ExchangeError::InvalidFraction(fraction));
    }
    let count = (fraction * dataset.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = rng::stream(seed, &[device.0 as u64]);
    let mut picked = index::sample(&mut rng, dataset.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| dataset.samples[i].clone())
        .collect())
}

/// Appends a copy of the whole cache to every member of `cluster`. Returns
/// `(member, samples received)` in member order.
pub fn cache_broadcast(
    cache: &Cache,
    cluster: &Cluster,
    datasets: &mut BTreeMap<NodeId, Dataset>,
) -> Result<Vec<(NodeId, usize)>, ExchangeError> {
    if cache.holder != cluster.parent {
        return Err(ExchangeError::WrongHolder {
            holder: cache.holder,
            parent: cluster.parent,
        });
    }
    if cache.is_empty() {
        return Ok(Vec::new());
    }
    let mut receipts = Vec::with_capacity(cluster.len());
    for &m in &cluster.members {
        datasets
            .entry(m)
            .or_insert_with(|| Dataset::new(Some(m), Vec::new()))
            .samples
            .extend(cache.samples.iter().cloned());
        receipts.push((m, cache.len()));
    }
    Ok(receipts)
}
