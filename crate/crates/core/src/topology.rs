//! The layered fog tree.
//!
//! Layer 0 holds the end devices and the top layer holds the single root
//! server. The nodes of each layer below the root are grouped into clusters;
//! every member of a cluster shares the cluster's parent in the layer above.
//! Each cluster carries a D2D graph used for consensus and, at the leaf layer,
//! a trust graph that gates dataset offloading.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Dataset;
use crate::netmodel::ComputeProfile;
use crate::rng::{self, tag};

const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid layer specification: {0}")]
    InvalidSpec(String),
    #[error("cluster {0} stayed disconnected after {MAX_REDRAWS} redraws")]
    Disconnected(ClusterId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error(
        "node {node} is in layer {node_layer} but cluster {cluster} is in layer {cluster_layer}"
    )]
    CrossLayerMigration {
        node: NodeId,
        node_layer: usize,
        cluster: ClusterId,
        cluster_layer: usize,
    },
    #[error("only leaf devices can depart; node {0} is not a leaf")]
    NonLeafDeparture(NodeId),
    #[error("invalid handover peer {0}")]
    InvalidPeer(NodeId),
    #[error("event for round {event} applied at boundary {boundary}")]
    StaleEvent { event: u64, boundary: u64 },
}

/// How a cluster's D2D graph is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum D2dModel {
    #[default]
    None,
    Complete,
    Ring,
    /// Erdős–Rényi with edge probability `p`.
    Random(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    ServerSide,
    D2dConsensus,
}

fn one() -> f64 {
    1.0
}

/// Shape of one tree layer. Nodes are grouped into clusters of `cluster_size`
/// consecutive ids; a shorter final cluster takes the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub node_count: usize,
    pub cluster_size: usize,
    #[serde(default)]
    pub d2d_model: D2dModel,
    /// Clusters of this layer aggregate by D2D consensus.
    #[serde(default)]
    pub d2d_enabled: bool,
    /// Edge probability of the trust overlay (leaf layer only).
    #[serde(default = "one")]
    pub trust_density: f64,
}

impl LayerSpec {
    pub fn new(node_count: usize, cluster_size: usize) -> Self {
        Self {
            node_count,
            cluster_size,
            d2d_model: D2dModel::None,
            d2d_enabled: false,
            trust_density: 1.0,
        }
    }

    pub fn with_d2d(mut self, model: D2dModel, enabled: bool) -> Self {
        self.d2d_model = model;
        self.d2d_enabled = enabled;
        self
    }

    pub fn root() -> Self {
        Self::new(1, 1)
    }
}

/// Symmetric boolean adjacency over cluster-local indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut a = Self::empty(n);
        for i in 0..n {
            for j in (i + 1)..n {
                a.set(i, j, true);
            }
        }
        a
    }

    pub fn ring(n: usize) -> Self {
        let mut a = Self::empty(n);
        if n >= 2 {
            for i in 0..n {
                a.set(i, (i + 1) % n, true);
            }
        }
        a
    }

    pub fn random(n: usize, p: f64, rng: &mut impl Rng) -> Self {
        let mut a = Self::empty(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    a.set(i, j, true);
                }
            }
        }
        a
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let n = rows.len();
        Self {
            n,
            bits: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.n + j] = value;
        self.bits[j * self.n + i] = value;
    }

    /// Sets only `(i, j)`; used to construct malformed graphs in tests.
    pub fn set_directed(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.n + j] = value;
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.get(i, j)).count()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| j != i && self.get(i, j))
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| !self.get(i, i))
    }

    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: ClusterId,
    pub layer: usize,
    /// Sorted ascending; adjacency indices follow this order.
    pub members: Vec<NodeId>,
    pub parent: NodeId,
    pub d2d: Adjacency,
    /// Trust overlay for offloading; edgeless above the leaf layer.
    pub trust: Adjacency,
    pub mode: AggregationMode,
    pub d2d_model: D2dModel,
    pub trust_density: f64,
}

impl Cluster {
    pub fn index_of(&self, node: NodeId) -> Option<usize> {
        self.members.binary_search(&node).ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn trusted(&self, a: NodeId, b: NodeId) -> bool {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => i != j && self.trust.get(i, j),
            _ => false,
        }
    }

    fn redraw(&mut self, rng: &mut impl Rng) -> Result<(), TopologyError> {
        let n = self.members.len();
        let needs_connected = self.mode == AggregationMode::D2dConsensus;
        let mut attempts = 0;
        loop {
            self.d2d = match self.d2d_model {
                D2dModel::None => Adjacency::empty(n),
                D2dModel::Complete => Adjacency::complete(n),
                D2dModel::Ring => Adjacency::ring(n),
                D2dModel::Random(p) => Adjacency::random(n, p, rng),
            };
            if !needs_connected || self.d2d.is_connected() {
                break;
            }
            attempts += 1;
            if attempts >= MAX_REDRAWS || !matches!(self.d2d_model, D2dModel::Random(_)) {
                return Err(TopologyError::Disconnected(self.id));
            }
        }
        self.trust = if self.layer == 0 {
            Adjacency::random(n, self.trust_density, rng)
        } else {
            Adjacency::empty(n)
        };
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub layer: usize,
    pub parent: Option<NodeId>,
    pub cluster: Option<ClusterId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FogTree {
    seed: u64,
    boundary: u64,
    specs: Vec<LayerSpec>,
    nodes: BTreeMap<NodeId, Node>,
    clusters: Vec<Cluster>,
    pub datasets: BTreeMap<NodeId, Dataset>,
    pub compute: BTreeMap<NodeId, ComputeProfile>,
}

fn validate_specs(specs: &[LayerSpec]) -> Result<(), TopologyError> {
    let bad = |m: String| Err(TopologyError::InvalidSpec(m));
    if specs.len() < 2 {
        return bad(format!("need at least 2 layers, got {}", specs.len()));
    }
    if specs.last().map(|s| s.node_count) != Some(1) {
        return bad("top layer must hold exactly one node".into());
    }
    for (i, s) in specs.iter().enumerate() {
        if s.node_count == 0 {
            return bad(format!("layer {i}: node_count must be positive"));
        }
        if s.cluster_size == 0 {
            return bad(format!("layer {i}: cluster_size must be positive"));
        }
        if let D2dModel::Random(p) = s.d2d_model {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!(
                    "layer {i}: random edge probability {p} outside [0,1]"
                ));
            }
        }
        if !(0.0..=1.0).contains(&s.trust_density) {
            return bad(format!("layer {i}: trust_density outside [0,1]"));
        }
        if i + 1 < specs.len() {
            let clusters = s.node_count.div_ceil(s.cluster_size);
            if clusters < specs[i + 1].node_count {
                return bad(format!(
                    "layer {i} forms {clusters} clusters but layer {} has {} nodes; some would have no children",
                    i + 1,
                    specs[i + 1].node_count
                ));
            }
        }
    }
    Ok(())
}

/// Builds the tree. Node ids are contiguous per layer starting at layer 0;
/// clusters take consecutive ids and their parents are assigned round-robin
/// over the layer above.
pub fn build_tree(specs: &[LayerSpec], seed: u64) -> Result<FogTree, TopologyError> {
    validate_specs(specs)?;
    let mut layers: Vec<Vec<NodeId>> = Vec::with_capacity(specs.len());
    let mut next = 0u32;
    for s in specs {
        layers.push((next..next + s.node_count as u32).map(NodeId).collect());
        next += s.node_count as u32;
    }
    let mut nodes = BTreeMap::new();
    for (layer, ids) in layers.iter().enumerate() {
        for &id in ids {
            nodes.insert(
                id,
                Node {
                    id,
                    layer,
                    parent: None,
                    cluster: None,
                },
            );
        }
    }
    let mut clusters = Vec::new();
    for layer in 0..specs.len() - 1 {
        let spec = &specs[layer];
        let above = &layers[layer + 1];
        for (k, chunk) in layers[layer].chunks(spec.cluster_size).enumerate() {
            let id = ClusterId(clusters.len() as u32);
            let parent = above[k % above.len()];
            let mode = if spec.d2d_enabled {
                AggregationMode::D2dConsensus
            } else {
                AggregationMode::ServerSide
            };
            let mut cluster = Cluster {
                id,
                layer,
                members: chunk.to_vec(),
                parent,
                d2d: Adjacency::empty(chunk.len()),
                trust: Adjacency::empty(chunk.len()),
                mode,
                d2d_model: spec.d2d_model,
                trust_density: spec.trust_density,
            };
            let mut rng = rng::stream(seed, &[tag::TOPOLOGY, id.0 as u64]);
            cluster.redraw(&mut rng)?;
            for &m in chunk {
                let node = nodes.get_mut(&m).expect("node just inserted");
                node.parent = Some(parent);
                node.cluster = Some(id);
            }
            clusters.push(cluster);
        }
    }
    Ok(FogTree {
        seed,
        boundary: 0,
        specs: specs.to_vec(),
        nodes,
        clusters,
        datasets: BTreeMap::new(),
        compute: BTreeMap::new(),
    })
}

/// A structural problem reported by [`validate_topology`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoRoot,
    MultipleRoots(Vec<NodeId>),
    MissingParent(NodeId),
    ParentLayer {
        node: NodeId,
        parent: NodeId,
    },
    LeafDepth {
        leaf: NodeId,
        depth: usize,
        expected: usize,
    },
    Unclustered(NodeId),
    MembershipMismatch {
        node: NodeId,
        cluster: ClusterId,
    },
    AsymmetricD2d(ClusterId),
    SelfLoop(ClusterId),
    AdjacencySize(ClusterId),
    DisconnectedConsensus(ClusterId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoRoot => write!(f, "no root"),
            Violation::MultipleRoots(r) => write!(f, "multiple roots: {r:?}"),
            Violation::MissingParent(n) => write!(f, "node {n} has a parent that does not exist"),
            Violation::ParentLayer { node, parent } => {
                write!(f, "node {node} has parent {parent} outside the layer above")
            }
            Violation::LeafDepth {
                leaf,
                depth,
                expected,
            } => write!(f, "leaf {leaf} is at depth {depth}, expected {expected}"),
            Violation::Unclustered(n) => write!(f, "node {n} belongs to no cluster"),
            Violation::MembershipMismatch { node, cluster } => {
                write!(
                    f,
                    "node {node} and cluster {cluster} disagree on membership"
                )
            }
            Violation::AsymmetricD2d(c) => write!(f, "cluster {c} has an asymmetric graph"),
            Violation::SelfLoop(c) => write!(f, "cluster {c} has a self loop"),
            Violation::AdjacencySize(c) => {
                write!(f, "cluster {c} adjacency size differs from membership")
            }
            Violation::DisconnectedConsensus(c) => {
                write!(f, "consensus cluster {c} has a disconnected D2D graph")
            }
        }
    }
}

/// Checks every structural invariant and reports all violations found.
pub fn validate_topology(tree: &FogTree) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let top = tree.specs.len() - 1;
    let roots: Vec<NodeId> = tree
        .nodes
        .values()
        .filter(|n| n.parent.is_none())
        .map(|n| n.id)
        .collect();
    match roots.len() {
        0 => out.push(Violation::NoRoot),
        1 => {}
        _ => out.push(Violation::MultipleRoots(roots)),
    }
    for node in tree.nodes.values() {
        if let Some(p) = node.parent {
            match tree.nodes.get(&p) {
                None => out.push(Violation::MissingParent(node.id)),
                Some(pn) if pn.layer != node.layer + 1 => out.push(Violation::ParentLayer {
                    node: node.id,
                    parent: p,
                }),
                _ => {}
            }
        }
        if node.layer == 0 {
            let mut depth = 0;
            let mut cur = node.parent;
            while let Some(p) = cur {
                depth += 1;
                if depth > tree.nodes.len() {
                    break;
                }
                cur = tree.nodes.get(&p).and_then(|n| n.parent);
            }
            if depth != top {
                out.push(Violation::LeafDepth {
                    leaf: node.id,
                    depth,
                    expected: top,
                });
            }
        }
        if node.layer < top {
            match node.cluster {
                None => out.push(Violation::Unclustered(node.id)),
                Some(c) => {
                    let ok = tree.clusters.get(c.0 as usize).is_some_and(|cl| {
                        cl.index_of(node.id).is_some()
                            && cl.layer == node.layer
                            && Some(cl.parent) == node.parent
                    });
                    if !ok {
                        out.push(Violation::MembershipMismatch {
                            node: node.id,
                            cluster: c,
                        });
                    }
                }
            }
        }
    }
    for cl in &tree.clusters {
        for &m in &cl.members {
            if tree.nodes.get(&m).and_then(|n| n.cluster) != Some(cl.id) {
                out.push(Violation::MembershipMismatch {
                    node: m,
                    cluster: cl.id,
                });
            }
        }
        if cl.d2d.len() != cl.members.len() || cl.trust.len() != cl.members.len() {
            out.push(Violation::AdjacencySize(cl.id));
            continue;
        }
        if !cl.d2d.is_symmetric() || !cl.trust.is_symmetric() {
            out.push(Violation::AsymmetricD2d(cl.id));
        }
        if !cl.d2d.has_zero_diagonal() || !cl.trust.has_zero_diagonal() {
            out.push(Violation::SelfLoop(cl.id));
        }
        if cl.mode == AggregationMode::D2dConsensus && !cl.d2d.is_connected() {
            out.push(Violation::DisconnectedConsensus(cl.id));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MobilityKind {
    Migrate { destination: ClusterId },
    Depart { handover_peer: Option<NodeId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityEvent {
    pub round: u64,
    pub node: NodeId,
    pub kind: MobilityKind,
}

/// Bookkeeping produced by one applied event.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MobilityOutcome {
    pub samples_handed_over: usize,
    pub samples_lost: usize,
    pub affected: Vec<ClusterId>,
}

impl FogTree {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_count(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// The unique parentless node. Panics on a tree without one.
    pub fn root(&self) -> NodeId {
        self.nodes
            .values()
            .find(|n| n.parent.is_none())
            .map(|n| n.id)
            .expect("tree has a root")
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    /// Raw access for fault injection; run [`validate_topology`] afterwards.
    pub fn nodes_mut(&mut self) -> &mut BTreeMap<NodeId, Node> {
        &mut self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn layer_nodes(&self, layer: usize) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.layer == layer)
            .map(|n| n.id)
            .collect()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.layer_nodes(0)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&Cluster> {
        self.clusters.get(id.0 as usize)
    }

    /// Raw access for fault injection and per-cluster overrides.
    pub fn cluster_mut(&mut self, id: ClusterId) -> Option<&mut Cluster> {
        self.clusters.get_mut(id.0 as usize)
    }

    pub fn layer_clusters(&self, layer: usize) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(move |c| c.layer == layer)
    }

    /// Clusters whose parent is `node`.
    pub fn child_clusters(&self, node: NodeId) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(move |c| c.parent == node)
    }

    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        self.child_clusters(node)
            .flat_map(|c| c.members.iter().copied())
            .collect()
    }

    pub fn cluster_of(&self, node: NodeId) -> Option<ClusterId> {
        self.nodes.get(&node).and_then(|n| n.cluster)
    }

    pub fn parent_of(&self, node: NodeId) -> Option<NodeId> {
        self.nodes.get(&node).and_then(|n| n.parent)
    }

    /// Leaves in the subtree rooted at `node` (the node itself if it is a leaf).
    pub fn leaves_under(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            match self.nodes.get(&n) {
                Some(info) if info.layer == 0 => out.push(n),
                Some(_) => stack.extend(self.children(n)),
                None => {}
            }
        }
        out.sort();
        out
    }

    /// Ancestors from the parent up to the root.
    pub fn ancestors(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.parent_of(node);
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent_of(p);
        }
        out
    }

    pub fn total_samples(&self) -> usize {
        self.datasets.values().map(Dataset::len).sum()
    }

    pub fn sample_count(&self, node: NodeId) -> usize {
        self.datasets.get(&node).map_or(0, Dataset::len)
    }

    pub fn boundary(&self) -> u64 {
        self.boundary
    }

    /// Sets the inter-round boundary at which mobility events may apply.
    pub fn set_boundary(&mut self, round: u64) {
        self.boundary = round;
    }

    /// Switches a cluster's aggregation mode, redrawing its graph if needed.
    pub fn set_mode(&mut self, id: ClusterId, mode: AggregationMode) -> Result<(), TopologyError> {
        let seed = self.seed;
        let cluster = self
            .clusters
            .get_mut(id.0 as usize)
            .ok_or(TopologyError::UnknownCluster(id))?;
        cluster.mode = mode;
        if mode == AggregationMode::D2dConsensus && !cluster.d2d.is_connected() {
            let mut rng = rng::stream(seed, &[tag::TOPOLOGY, id.0 as u64, 1]);
            cluster.redraw(&mut rng)?;
        }
        Ok(())
    }

    fn redraw_cluster(&mut self, id: ClusterId, round: u64) -> Result<(), TopologyError> {
        let mut rng = rng::stream(self.seed, &[tag::REDRAW, round, id.0 as u64]);
        self.clusters[id.0 as usize].redraw(&mut rng)
    }

    /// Applies a migrate or depart event at the current round boundary.
    pub fn apply_mobility_event(
        &mut self,
        event: &MobilityEvent,
    ) -> Result<MobilityOutcome, TopologyError> {
        if event.round != self.boundary {
            return Err(TopologyError::StaleEvent {
                event: event.round,
                boundary: self.boundary,
            });
        }
        let node = self
            .nodes
            .get(&event.node)
            .cloned()
            .ok_or(TopologyError::UnknownNode(event.node))?;
        let source = node.cluster.ok_or(TopologyError::UnknownNode(event.node))?;
        let mut outcome = MobilityOutcome::default();
        match &event.kind {
            MobilityKind::Migrate { destination } => {
                let dest = self
                    .cluster(*destination)
                    .ok_or(TopologyError::UnknownCluster(*destination))?;
                if dest.layer != node.layer {
                    return Err(TopologyError::CrossLayerMigration {
                        node: node.id,
                        node_layer: node.layer,
                        cluster: dest.id,
                        cluster_layer: dest.layer,
                    });
                }
                if *destination == source {
                    return Ok(outcome);
                }
                let new_parent = dest.parent;
                self.clusters[source.0 as usize]
                    .members
                    .retain(|&m| m != node.id);
                let members = &mut self.clusters[destination.0 as usize].members;
                let pos = members.binary_search(&node.id).unwrap_err();
                members.insert(pos, node.id);
                let entry = self.nodes.get_mut(&node.id).expect("checked above");
                entry.cluster = Some(*destination);
                entry.parent = Some(new_parent);
                outcome.affected = vec![source, *destination];
            }
            MobilityKind::Depart { handover_peer } => {
                if node.layer != 0 {
                    return Err(TopologyError::NonLeafDeparture(node.id));
                }
                if let Some(peer) = handover_peer {
                    let valid =
                        *peer != node.id && self.nodes.get(peer).is_some_and(|p| p.layer == 0);
                    if !valid {
                        return Err(TopologyError::InvalidPeer(*peer));
                    }
                }
                let data = self.datasets.remove(&node.id).unwrap_or_default();
                match handover_peer {
                    Some(peer) => {
                        outcome.samples_handed_over = data.len();
                        self.datasets
                            .entry(*peer)
                            .or_insert_with(|| Dataset::new(Some(*peer), Vec::new()))
                            .samples
                            .extend(data.samples);
                    }
                    None => outcome.samples_lost = data.len(),
                }
                self.compute.remove(&node.id);
                self.nodes.remove(&node.id);
                self.clusters[source.0 as usize]
                    .members
                    .retain(|&m| m != node.id);
                outcome.affected = vec![source];
            }
        }
        for &c in &outcome.affected {
            self.redraw_cluster(c, event.round)?;
        }
        Ok(outcome)
    }
}

/// Mobility stream settings. The number of events per round is Poisson with
/// mean `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilitySpec {
    #[serde(default)]
    pub rate: f64,
    /// Probability that an event is a departure rather than a migration.
    #[serde(default)]
    pub depart_probability: f64,
    /// Departing devices hand their data to a same-cluster peer when one exists.
    #[serde(default = "default_true")]
    pub handover: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MobilitySpec {
    fn default() -> Self {
        Self {
            rate: 0.0,
            depart_probability: 0.0,
            handover: true,
        }
    }
}

/// Draws this round's leaf mobility events against the current tree. Each
/// device appears in at least one event and at least one device always stays.
pub fn draw_mobility_events(tree: &FogTree, round: u64, spec: &MobilitySpec) -> Vec<MobilityEvent> {
    if spec.rate <= 0.0 {
        return Vec::new();
    }
    let mut rng = rng::stream(tree.seed, &[tag::MOBILITY, round]);
    let leaves = tree.leaves();
    let count = match Poisson::new(spec.rate) {
        Ok(p) => p.sample(&mut rng) as usize,
        Err(_) => 0,
    };
    let count = count.min(leaves.len().saturating_sub(1));
    let mut picked = leaves.clone();
    picked.shuffle(&mut rng);
    picked.truncate(count);
    let mut departing = BTreeSet::new();
    let leaf_clusters: Vec<ClusterId> = tree.layer_clusters(0).map(|c| c.id).collect();
    let mut events = Vec::with_capacity(count);
    for node in picked {
        let source = tree.cluster_of(node).expect("leaf is clustered");
        let depart = rng.random::<f64>() < spec.depart_probability;
        if depart {
            departing.insert(node);
            let handover_peer = if spec.handover {
                let peers: Vec<NodeId> = tree
                    .cluster(source)
                    .map(|c| {
                        c.members
                            .iter()
                            .copied()
                            .filter(|m| *m != node && !departing.contains(m))
                            .collect()
                    })
                    .unwrap_or_default();
                peers.choose(&mut rng).copied()
            } else {
                None
            };
            events.push(MobilityEvent {
                round,
                node,
                kind: MobilityKind::Depart { handover_peer },
            });
        } else {
            let options: Vec<ClusterId> = leaf_clusters
                .iter()
                .copied()
                .filter(|&c| c != source)
                .collect();
            if let Some(&destination) = options.choose(&mut rng) {
                events.push(MobilityEvent {
                    round,
                    node,
                    kind: MobilityKind::Migrate { destination },
                });
            }
        }
    }
    // a peer chosen earlier must not depart later in the same round
    let departing_now: BTreeSet<NodeId> = events
        .iter()
        .filter(|e| matches!(e.kind, MobilityKind::Depart { .. }))
        .map(|e| e.node)
        .collect();
    for e in &mut events {
        if let MobilityKind::Depart { handover_peer } = &mut e.kind {
            if handover_peer.is_some_and(|p| departing_now.contains(&p)) {
                *handover_peer = None;
            }
        }
    }
    events
}
