use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;

use super::config::SimulationConfig;
use super::schedule::{build_blocks, sample_clusters, schedule_round, BlockAction, LearningBlock};
use super::{MetricsRow, SimError, SimulationOutput, StepError};
use crate::aggregation::{
    aggregate_cluster, weighted_average, ClusterInput, ClusterResult, ClusterSettings,
};
use crate::exchange::{cache_broadcast, cache_upload, execute_offload, plan_offload, Cache};
use crate::model::{evaluate, generate_partitions, local_update, Dataset, ParameterVector};
use crate::netmodel::{
    compute_delay, compute_energy, transmission_cost, DelayTracker, Event, EventKind, Ledger,
    LinkKind, Phase,
};
use crate::rng::{self, derive_seed, tag};
use crate::topology::{
    build_tree, draw_mobility_events, AggregationMode, ClusterId, FogTree, MobilityKind, NodeId,
};

// Delay stage slots within one intra iteration.
const STAGE_TRAIN: u32 = 0;
const STAGE_LAYER: u32 = 1;
const STAGE_BROADCAST: u32 = 1000;

/// Runs a validated configuration to completion.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationOutput, SimError> {
    let violations = config.validate();
    if !violations.is_empty() {
        return Err(SimError::InvalidConfig(violations));
    }
    let mut engine = Engine::new(config)?;
    engine.run()
}

fn at(round: u64, phase: Phase) -> impl Fn(StepError) -> SimError {
    move |cause| SimError::Round {
        round,
        phase,
        cause,
    }
}

/// Builds the tree with data and compute profiles attached, plus the held-out
/// test set. Shared with the baselines so every variant sees the same data.
pub(super) fn setup(config: &SimulationConfig) -> Result<(FogTree, Dataset), StepError> {
    let mut tree = build_tree(&config.layers, config.seed)?;
    for (&id, &mode) in &config.consensus.modes {
        tree.set_mode(ClusterId(id), mode)?;
    }
    let parts = generate_partitions(&config.partition_spec(), config.seed)?;
    let leaves = tree.leaves();
    for (leaf, data) in leaves.iter().zip(parts.devices) {
        tree.datasets.insert(*leaf, data);
    }
    let n = leaves.len();
    let slow = ((config.compute.slow_fraction * n as f64).round() as usize).min(n);
    let mut rng = rng::stream(config.seed, &[tag::SLOW_DEVICES]);
    let slow: BTreeSet<usize> = index::sample(&mut rng, n, slow).into_iter().collect();
    for (i, leaf) in leaves.iter().enumerate() {
        let profile = if slow.contains(&i) {
            config.compute.profile.slowed(config.compute.slowdown)
        } else {
            config.compute.profile
        };
        tree.compute.insert(*leaf, profile);
    }
    Ok((tree, parts.test))
}

struct Engine<'a> {
    cfg: &'a SimulationConfig,
    tree: FogTree,
    test: Dataset,
    blocks: Vec<LearningBlock>,
    block_of_cluster: BTreeMap<ClusterId, usize>,
    block_of_head: BTreeMap<NodeId, usize>,
    g: usize,
    width: u64,
    settings: ClusterSettings,
    global: ParameterVector,
    /// Current model of every device.
    models: BTreeMap<NodeId, ParameterVector>,
    /// Combination of child-cluster aggregates held at each non-leaf node.
    values: BTreeMap<NodeId, (ParameterVector, f64)>,
    /// Latest aggregate each cluster delivered to its parent.
    cluster_cache: BTreeMap<ClusterId, (ParameterVector, f64)>,
    /// Latest vector each member of an upper server-side cluster uploaded.
    reported: BTreeMap<NodeId, (ParameterVector, f64)>,
    /// Block heads whose value changed since their last vertical send.
    pending: BTreeSet<NodeId>,
    events: Vec<Event>,
    total: Ledger,
    round: Ledger,
    delay: DelayTracker,
}

/// What a round decided before training starts.
struct RoundPlan {
    sampled: BTreeSet<ClusterId>,
    dropped: BTreeSet<NodeId>,
    actions: Vec<BlockAction>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimulationConfig) -> Result<Self, SimError> {
        let (tree, test) = setup(cfg).map_err(SimError::Setup)?;
        let blocks = build_blocks(&tree, &cfg.blocks)
            .map_err(|e| SimError::Setup(StepError::Schedule(e)))?;
        let mut block_of_cluster = BTreeMap::new();
        let mut block_of_head = BTreeMap::new();
        for b in &blocks {
            for c in &b.clusters {
                block_of_cluster.insert(*c, b.id);
            }
            for h in &b.heads {
                block_of_head.insert(*h, b.id);
            }
        }
        let g = cfg.param_len();
        let global = ParameterVector::zeros(g);
        let models = tree
            .leaves()
            .into_iter()
            .map(|l| (l, global.clone()))
            .collect();
        Ok(Self {
            cfg,
            tree,
            test,
            blocks,
            block_of_cluster,
            block_of_head,
            g,
            width: cfg.sample_width(),
            settings: ClusterSettings {
                consensus_rounds: cfg.consensus.rounds,
                d2d_noise_sigma: cfg.consensus.noise_sigma,
                uplink_noise_sigma: cfg.uplink_noise_sigma,
                compression: cfg.compression,
            },
            global,
            models,
            values: BTreeMap::new(),
            cluster_cache: BTreeMap::new(),
            reported: BTreeMap::new(),
            pending: BTreeSet::new(),
            events: Vec::new(),
            total: Ledger::new(cfg.sample_width()),
            round: Ledger::new(cfg.sample_width()),
            delay: DelayTracker::default(),
        })
    }

    fn emit(&mut self, event: Event) {
        self.round.record(&event);
        self.total.record(&event);
        self.events.push(event);
    }

    fn transfer(
        &mut self,
        r: u64,
        phase: Phase,
        link: LinkKind,
        src: NodeId,
        dst: NodeId,
        params: u64,
    ) -> f64 {
        let e = Event::transfer(r, phase, self.cfg.costs.link(link), src, dst, params);
        let seconds = e.seconds;
        self.emit(e);
        seconds
    }

    fn row(&self, r: u64, sampled: usize) -> Result<MetricsRow, StepError> {
        let report = evaluate(&self.global, &self.test)?;
        Ok(MetricsRow {
            round: r,
            global_loss: report.loss,
            global_accuracy: report.accuracy,
            uplink_params: self.round.uplink_params,
            downlink_params: self.round.downlink_params,
            d2d_params: self.round.d2d_params,
            total_energy_j: self.round.total_energy_j,
            round_delay_s: self.delay.total(),
            stragglers_dropped: self.round.stragglers_dropped,
            clusters_sampled: sampled as u64,
            samples_moved: self.round.data_samples_moved,
        })
    }

    fn run(&mut self) -> Result<SimulationOutput, SimError> {
        let rounds = self.cfg.training.global_rounds as u64;
        let mut rows = Vec::new();
        let mut errors = Vec::new();
        if rounds == 0 {
            rows.push(self.row(0, 0).map_err(at(0, Phase::Train))?);
            errors.push(None);
        }
        for r in 1..=rounds {
            self.round = Ledger::new(self.width);
            self.delay = DelayTracker::default();
            self.mobility(r).map_err(at(r, Phase::Mobility))?;
            let sampled = self.sample(r).map_err(at(r, Phase::Train))?;
            if r == 1 && self.cfg.cache_fraction > 0.0 {
                self.cache(r).map_err(at(r, Phase::Cache))?;
            }
            if self.cfg.offloading {
                self.offload(r, &sampled).map_err(at(r, Phase::Offload))?;
            }
            let dropped = self.stragglers(r, &sampled);
            let plan = RoundPlan {
                sampled,
                dropped,
                actions: schedule_round(&self.blocks, r),
            };
            let mut round_errors = Vec::new();
            let iterations = self
                .blocks
                .iter()
                .map(|b| b.intra_rounds)
                .max()
                .unwrap_or(1);
            for it in 1..=iterations {
                self.train(r, it, &plan).map_err(at(r, Phase::Train))?;
                self.aggregate(r, it, &plan, &mut round_errors)?;
                self.broadcast(r, it, &plan);
            }
            if let Some(root) = self.values.get(&self.tree.root()) {
                self.global = root.0.clone();
            }
            let row = self
                .row(r, plan.sampled.len())
                .map_err(at(r, Phase::Broadcast))?;
            rows.push(row);
            errors.push(if round_errors.is_empty() {
                None
            } else {
                Some(round_errors.iter().sum::<f64>() / round_errors.len() as f64)
            });
        }
        Ok(SimulationOutput {
            rows,
            final_params: self.global.clone(),
            events: std::mem::take(&mut self.events),
            consensus_error: errors,
            ledger: self.total.clone(),
        })
    }

    fn mobility(&mut self, r: u64) -> Result<(), StepError> {
        if self.cfg.mobility.rate <= 0.0 {
            return Ok(());
        }
        self.tree.set_boundary(r);
        for event in draw_mobility_events(&self.tree, r, &self.cfg.mobility) {
            let held = self.tree.sample_count(event.node) as u64;
            let outcome = self.tree.apply_mobility_event(&event)?;
            match event.kind {
                MobilityKind::Migrate { destination } => {
                    // a migrant syncs to the model of the cluster it joins
                    if let Some((params, _)) = self.cluster_cache.get(&destination) {
                        self.models.insert(event.node, params.clone());
                    }
                }
                MobilityKind::Depart { handover_peer } => {
                    self.models.remove(&event.node);
                    match handover_peer {
                        Some(peer) if held > 0 => {
                            let s = self.transfer(
                                r,
                                Phase::Mobility,
                                LinkKind::D2d,
                                event.node,
                                peer,
                                held * self.width,
                            );
                            self.delay.note((0, 0, 0), s);
                        }
                        _ if outcome.samples_lost > 0 => {
                            let lost = outcome.samples_lost as u64 * self.width;
                            self.emit(Event::marker(
                                r,
                                Phase::Mobility,
                                EventKind::DataLoss,
                                event.node,
                                lost,
                            ));
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    fn sample(&self, r: u64) -> Result<BTreeSet<ClusterId>, StepError> {
        let leaves: Vec<ClusterId> = self.tree.layer_clusters(0).map(|c| c.id).collect();
        let picked = sample_clusters(&leaves, self.cfg.sampling.fraction, self.cfg.seed, r)
            .map_err(StepError::Schedule)?;
        Ok(picked.into_iter().collect())
    }

    fn cache(&mut self, r: u64) -> Result<(), StepError> {
        let seed = derive_seed(self.cfg.seed, &[tag::CACHE, r]);
        let clusters: Vec<_> = self
            .tree
            .layer_clusters(0)
            .filter(|c| !c.is_empty())
            .cloned()
            .collect();
        for cluster in clusters {
            let mut cache = Cache::new(cluster.parent);
            let mut upload_time = 0.0;
            for &m in &cluster.members {
                let Some(data) = self.tree.datasets.get(&m) else {
                    continue;
                };
                let delta = cache_upload(m, data, self.cfg.cache_fraction, seed)?;
                if !delta.is_empty() {
                    let params = delta.len() as u64 * self.width;
                    upload_time +=
                        self.transfer(r, Phase::Cache, LinkKind::Uplink, m, cluster.parent, params);
                    cache.samples.extend(delta);
                }
            }
            self.delay.note((0, 1, 0), upload_time);
            let receipts = cache_broadcast(&cache, &cluster, &mut self.tree.datasets)?;
            for (m, count) in receipts {
                let s = self.transfer(
                    r,
                    Phase::Cache,
                    LinkKind::Downlink,
                    cluster.parent,
                    m,
                    count as u64 * self.width,
                );
                self.delay.note((0, 1, 1), s);
            }
        }
        Ok(())
    }

    fn offload(&mut self, r: u64, sampled: &BTreeSet<ClusterId>) -> Result<(), StepError> {
        let deadline = self
            .cfg
            .deadline
            .expect("validated: offloading needs a deadline");
        let steps = self.cfg.training.local_steps;
        for &cid in sampled {
            let cluster = self
                .tree
                .cluster(cid)
                .expect("sampled cluster exists")
                .clone();
            if cluster.is_empty() {
                continue;
            }
            let plan = plan_offload(
                &cluster,
                &self.tree.datasets,
                &self.tree.compute,
                deadline,
                steps,
            )?;
            if plan.is_empty() {
                continue;
            }
            plan.check_trust(&cluster)?;
            execute_offload(&mut self.tree.datasets, &plan)?;
            let mut busy: BTreeMap<NodeId, f64> = BTreeMap::new();
            for t in &plan.transfers {
                let params = t.sample_indices.len() as u64 * self.width;
                let s = self.transfer(
                    r,
                    Phase::Offload,
                    LinkKind::D2d,
                    t.source,
                    t.destination,
                    params,
                );
                *busy.entry(t.source).or_default() += s;
            }
            for s in busy.into_values() {
                self.delay.note((0, 2, 0), s);
            }
        }
        Ok(())
    }

    fn stragglers(&mut self, r: u64, sampled: &BTreeSet<ClusterId>) -> BTreeSet<NodeId> {
        let mut dropped = BTreeSet::new();
        let Some(deadline) = self.cfg.deadline else {
            return dropped;
        };
        let steps = self.cfg.training.local_steps;
        for &cid in sampled {
            for &m in &self
                .tree
                .cluster(cid)
                .expect("sampled cluster exists")
                .members
            {
                let profile = self.tree.compute[&m];
                if compute_delay(&profile, self.tree.sample_count(m), steps) > deadline {
                    dropped.insert(m);
                }
            }
        }
        for &m in &dropped {
            self.emit(Event::marker(r, Phase::Train, EventKind::Drop, m, 0));
        }
        dropped
    }

    fn block_active(&self, cluster: ClusterId, it: usize) -> bool {
        self.block_of_cluster
            .get(&cluster)
            .is_some_and(|&b| it <= self.blocks[b].intra_rounds)
    }

    fn train(&mut self, r: u64, it: usize, plan: &RoundPlan) -> Result<(), StepError> {
        let steps = self.cfg.training.local_steps;
        let lr = self.cfg.training.learning_rate;
        let clusters: Vec<(ClusterId, Vec<NodeId>)> = self
            .tree
            .layer_clusters(0)
            .map(|c| (c.id, c.members.clone()))
            .collect();
        for (cid, members) in clusters {
            if !self.block_active(cid, it) {
                continue;
            }
            let sampled = plan.sampled.contains(&cid);
            if !sampled && !self.cfg.sampling.continue_unsampled {
                continue;
            }
            for m in members {
                let data = &self.tree.datasets[&m];
                if data.is_empty() {
                    continue;
                }
                let profile = self.tree.compute[&m];
                let start = self.models.entry(m).or_insert_with(|| self.global.clone());
                let update = local_update(start, data, steps, lr)?;
                let seconds = compute_delay(&profile, data.len(), steps);
                let joules = compute_energy(&profile, data.len(), steps);
                let keep = !plan.dropped.contains(&m);
                if keep {
                    self.models.insert(m, update.params);
                    if sampled {
                        self.delay.note((it as u32, STAGE_TRAIN, 0), seconds);
                    }
                }
                let mut e = Event::marker(r, Phase::Train, EventKind::Compute, m, 0);
                e.joules = joules;
                e.seconds = seconds;
                self.emit(e);
            }
        }
        Ok(())
    }

    fn residual(&self, members: &[NodeId]) -> BTreeMap<NodeId, f64> {
        members
            .iter()
            .map(|m| {
                let spent = self.total.energy_joules.get(m).copied().unwrap_or(0.0);
                (*m, self.cfg.compute.battery_j - spent)
            })
            .collect()
    }

    /// Whether a block's vertical send happens in this iteration.
    fn vertical_now(&self, block: usize, it: usize, plan: &RoundPlan) -> bool {
        plan.actions[block] == BlockAction::IntraAndVertical
            && it == self.blocks[block].intra_rounds
    }

    fn record(&mut self, r: u64, phase: Phase, layer: usize, it: usize, result: &ClusterResult) {
        let mut upload = 0.0;
        for t in &result.transfers {
            let s = self.transfer(r, phase, t.link, t.src, t.dst, t.params);
            if t.link == LinkKind::Uplink {
                upload += s;
            }
        }
        let stage = STAGE_LAYER + 2 * layer as u32;
        if result.d2d_messages > 0 {
            let cluster = self.tree.cluster_of(result.member_states[0].0);
            let max_deg = cluster
                .and_then(|c| self.tree.cluster(c))
                .map_or(0, |c| c.d2d.max_degree());
            let per_round = transmission_cost((max_deg * self.g) as u64, &self.cfg.costs.d2d).delay;
            self.delay.note(
                (it as u32, stage, 0),
                per_round * self.settings.consensus_rounds as f64,
            );
        }
        self.delay.note((it as u32, stage + 1, 0), upload);
    }

    fn aggregate(
        &mut self,
        r: u64,
        it: usize,
        plan: &RoundPlan,
        errors: &mut Vec<f64>,
    ) -> Result<(), SimError> {
        let top = self.tree.layer_count() - 1;
        let mut fresh: BTreeSet<NodeId> = BTreeSet::new();
        for layer in 0..top {
            let clusters: Vec<_> = self
                .tree
                .layer_clusters(layer)
                .filter(|c| !c.is_empty())
                .cloned()
                .collect();
            let mut touched: BTreeSet<NodeId> = BTreeSet::new();
            for cluster in clusters {
                let in_block = self.block_of_cluster.get(&cluster.id).copied();
                let phase = if in_block.is_some() {
                    Phase::Aggregate
                } else {
                    Phase::Vertical
                };
                let fail = at(r, phase);
                if let Some(b) = in_block {
                    if it > self.blocks[b].intra_rounds {
                        continue;
                    }
                }
                let seed = derive_seed(
                    self.cfg.seed,
                    &[tag::CONSENSUS, r, it as u64, cluster.id.0 as u64],
                );
                let residual = self.residual(&cluster.members);
                if layer == 0 {
                    if !plan.sampled.contains(&cluster.id) {
                        continue;
                    }
                    let participants: Vec<NodeId> = cluster
                        .members
                        .iter()
                        .copied()
                        .filter(|m| !plan.dropped.contains(m) && self.tree.sample_count(*m) > 0)
                        .collect();
                    if participants.is_empty() {
                        self.emit(Event::marker(
                            r,
                            phase,
                            EventKind::StaleCluster,
                            cluster.parent,
                            0,
                        ));
                        continue;
                    }
                    let inputs: Vec<ClusterInput> = match cluster.mode {
                        AggregationMode::ServerSide => participants
                            .iter()
                            .map(|m| ClusterInput {
                                node: *m,
                                params: self.models[m].clone(),
                                weight: self.tree.sample_count(*m) as f64,
                            })
                            .collect(),
                        AggregationMode::D2dConsensus => cluster
                            .members
                            .iter()
                            .map(|m| ClusterInput {
                                node: *m,
                                params: self
                                    .models
                                    .get(m)
                                    .cloned()
                                    .unwrap_or_else(|| self.global.clone()),
                                weight: if participants.contains(m) {
                                    self.tree.sample_count(*m) as f64
                                } else {
                                    0.0
                                },
                            })
                            .collect(),
                    };
                    let result =
                        aggregate_cluster(&cluster, &inputs, &self.settings, &residual, seed)
                            .map_err(|e| fail(e.into()))?;
                    self.record(r, phase, layer, it, &result);
                    if let Some(e) = result.consensus_error {
                        errors.push(e);
                    }
                    self.cluster_cache
                        .insert(cluster.id, (result.aggregate, result.weight));
                    touched.insert(cluster.parent);
                    continue;
                }
                let fresh_members: Vec<NodeId> = cluster
                    .members
                    .iter()
                    .copied()
                    .filter(|m| fresh.contains(m))
                    .collect();
                if fresh_members.is_empty() {
                    continue;
                }
                match cluster.mode {
                    AggregationMode::ServerSide => {
                        for m in fresh_members {
                            let (params, weight) = self.values[&m].clone();
                            let input = [ClusterInput {
                                node: m,
                                params,
                                weight,
                            }];
                            let result = aggregate_cluster(
                                &cluster,
                                &input,
                                &self.settings,
                                &residual,
                                seed,
                            )
                            .map_err(|e| fail(e.into()))?;
                            self.record(r, phase, layer, it, &result);
                            self.reported.insert(m, (result.aggregate, result.weight));
                        }
                        let (vectors, weights): (Vec<_>, Vec<_>) = cluster
                            .members
                            .iter()
                            .filter_map(|m| self.reported.get(m).cloned())
                            .unzip();
                        let total = weights.iter().sum();
                        let combined =
                            weighted_average(&vectors, &weights).map_err(|e| fail(e.into()))?;
                        self.cluster_cache.insert(cluster.id, (combined, total));
                    }
                    AggregationMode::D2dConsensus => {
                        let inputs: Vec<ClusterInput> = cluster
                            .members
                            .iter()
                            .map(|m| match self.values.get(m) {
                                Some((p, w)) => ClusterInput {
                                    node: *m,
                                    params: p.clone(),
                                    weight: *w,
                                },
                                None => ClusterInput {
                                    node: *m,
                                    params: ParameterVector::zeros(self.g),
                                    weight: 0.0,
                                },
                            })
                            .collect();
                        let result =
                            aggregate_cluster(&cluster, &inputs, &self.settings, &residual, seed)
                                .map_err(|e| fail(e.into()))?;
                        self.record(r, phase, layer, it, &result);
                        self.cluster_cache
                            .insert(cluster.id, (result.aggregate, result.weight));
                    }
                }
                touched.insert(cluster.parent);
            }
            for parent in touched {
                let (vectors, weights): (Vec<_>, Vec<_>) = self
                    .tree
                    .child_clusters(parent)
                    .filter_map(|c| self.cluster_cache.get(&c.id).cloned())
                    .unzip();
                let total = weights.iter().sum();
                let combined = weighted_average(&vectors, &weights)
                    .map_err(|e| at(r, Phase::Aggregate)(e.into()))?;
                self.values.insert(parent, (combined, total));
                match self.block_of_head.get(&parent) {
                    Some(_) => {
                        self.pending.insert(parent);
                    }
                    None => {
                        fresh.insert(parent);
                    }
                }
            }
            // heads of blocks due now join the upward pass with whatever
            // they gathered since their last send
            for b in 0..self.blocks.len() {
                if self.blocks[b].head_layer == layer + 1 && self.vertical_now(b, it, plan) {
                    for h in self.blocks[b].heads.clone() {
                        if self.pending.remove(&h) {
                            fresh.insert(h);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Sends `source`'s value down the tree to every member of the given leaf
    /// clusters, one downlink per tree edge, top-down.
    fn send_down(&mut self, r: u64, it: usize, source: NodeId, targets: &[ClusterId]) {
        let Some((params, _)) = self.values.get(&source).cloned() else {
            return;
        };
        let mut edges: BTreeSet<(Reverse<usize>, NodeId, NodeId)> = BTreeSet::new();
        let mut devices = Vec::new();
        for cid in targets {
            let cluster = self.tree.cluster(*cid).expect("target cluster exists");
            for &m in &cluster.members {
                devices.push(m);
                let mut child = m;
                while child != source {
                    let Some(parent) = self.tree.parent_of(child) else {
                        break;
                    };
                    let layer = self.tree.node(parent).map_or(0, |n| n.layer);
                    edges.insert((Reverse(layer), parent, child));
                    child = parent;
                }
            }
        }
        for (Reverse(layer), parent, child) in edges {
            let s = self.transfer(
                r,
                Phase::Broadcast,
                LinkKind::Downlink,
                parent,
                child,
                self.g as u64,
            );
            self.delay
                .note((it as u32, STAGE_BROADCAST + (1000 - layer as u32), 0), s);
        }
        for d in devices {
            self.models.insert(d, params.clone());
        }
    }

    fn broadcast(&mut self, r: u64, it: usize, plan: &RoundPlan) {
        let root = self.tree.root();
        let mut from_root = Vec::new();
        for b in 0..self.blocks.len() {
            if it > self.blocks[b].intra_rounds {
                continue;
            }
            let targets: Vec<ClusterId> = self.blocks[b]
                .clusters
                .iter()
                .copied()
                .filter(|c| plan.sampled.contains(c))
                .collect();
            if targets.is_empty() {
                continue;
            }
            let heads_root = self.blocks[b].heads == [root];
            if self.vertical_now(b, it, plan) || heads_root {
                from_root.extend(targets);
            } else {
                for h in self.blocks[b].heads.clone() {
                    let under: Vec<ClusterId> = targets
                        .iter()
                        .copied()
                        .filter(|c| {
                            let parent = self.tree.cluster(*c).expect("exists").parent;
                            parent == h || self.tree.ancestors(parent).contains(&h)
                        })
                        .collect();
                    self.send_down(r, it, h, &under);
                }
            }
        }
        if !from_root.is_empty() {
            from_root.sort();
            self.send_down(r, it, root, &from_root);
        }
        if let Some((params, _)) = self.values.get(&root) {
            self.global = params.clone();
        }
    }
}
