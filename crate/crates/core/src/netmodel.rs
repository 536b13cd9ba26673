//! Costs of protocol actions and the ledgers that accumulate them.
//!
//! Traffic is counted in parameters (one real number), not bytes. Data
//! transfers count `feature_dim + 1` parameters per sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParameterVector;
use crate::rng;
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("deadline must be positive, got {0}")]
    InvalidDeadline(f64),
    #[error("noise sigma must be non-negative, got {0}")]
    InvalidSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Uplink,
    Downlink,
    D2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Parameters per second.
    pub rate: f64,
    /// Joules per transmitted parameter.
    pub energy_per_param: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub kind: LinkKind,
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), String> {
        if !self.rate.is_finite() || self.rate <= 0.0 {
            return Err(format!("rate must be positive, got {}", self.rate));
        }
        if !self.energy_per_param.is_finite() || self.energy_per_param < 0.0 {
            return Err(format!(
                "energy_per_param must be non-negative, got {}",
                self.energy_per_param
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

/// Link constants for the three link classes.
///
/// Defaults are simulator choices: uplink 10 J per thousand parameters,
/// downlink 5, D2D 1; D2D runs five times faster than uplink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub uplink: LinkModel,
    pub downlink: LinkModel,
    pub d2d: LinkModel,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            uplink: LinkModel {
                rate: 1.0e5,
                energy_per_param: 0.010,
                noise_sigma: 0.0,
                kind: LinkKind::Uplink,
            },
            downlink: LinkModel {
                rate: 2.0e5,
                energy_per_param: 0.005,
                noise_sigma: 0.0,
                kind: LinkKind::Downlink,
            },
            d2d: LinkModel {
                rate: 5.0e5,
                energy_per_param: 0.001,
                noise_sigma: 0.0,
                kind: LinkKind::D2d,
            },
        }
    }
}

impl CostModel {
    pub fn link(&self, kind: LinkKind) -> &LinkModel {
        match kind {
            LinkKind::Uplink => &self.uplink,
            LinkKind::Downlink => &self.downlink,
            LinkKind::D2d => &self.d2d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeProfile {
    pub samples_per_second: f64,
    /// Joules per sample per gradient step.
    pub energy_per_sample_step: f64,
}

impl Default for ComputeProfile {
    fn default() -> Self {
        Self {
            samples_per_second: 1000.0,
            energy_per_sample_step: 1.0e-4,
        }
    }
}

impl ComputeProfile {
    pub fn slowed(self, factor: f64) -> Self {
        Self {
            samples_per_second: self.samples_per_second / factor,
            ..self
        }
    }

    /// Samples a device can process per round: `rate * deadline / steps`.
    pub fn capacity(&self, deadline: f64, steps: usize) -> f64 {
        self.samples_per_second * deadline / steps.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmissionCost {
    pub delay: f64,
    pub energy: f64,
}

pub fn transmission_cost(param_count: u64, link: &LinkModel) -> TransmissionCost {
    TransmissionCost {
        delay: param_count as f64 / link.rate,
        energy: param_count as f64 * link.energy_per_param,
    }
}

/// Seconds for `steps` full-batch passes over `sample_count` samples.
pub fn compute_delay(profile: &ComputeProfile, sample_count: usize, steps: usize) -> f64 {
    (steps * sample_count) as f64 / profile.samples_per_second
}

pub fn compute_energy(profile: &ComputeProfile, sample_count: usize, steps: usize) -> f64 {
    (steps * sample_count) as f64 * profile.energy_per_sample_step
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StragglerOutcome {
    pub participants: BTreeSet<NodeId>,
    pub dropped: BTreeSet<NodeId>,
}

/// Devices whose delay exceeds `deadline` sit out this round.
pub fn apply_straggler_policy(
    delays: &BTreeMap<NodeId, f64>,
    deadline: f64,
) -> Result<StragglerOutcome, NetError> {
    if deadline.is_nan() || deadline <= 0.0 {
        return Err(NetError::InvalidDeadline(deadline));
    }
    let mut out = StragglerOutcome::default();
    for (&node, &delay) in delays {
        if delay <= deadline {
            out.participants.insert(node);
        } else {
            out.dropped.insert(node);
        }
    }
    Ok(out)
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`.
pub fn apply_channel_noise(
    vector: &ParameterVector,
    sigma: f64,
    seed: u64,
) -> Result<ParameterVector, NetError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(NetError::InvalidSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(vector.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| NetError::InvalidSigma(sigma))?;
    let mut rng = rng::stream(seed, &[]);
    Ok(ParameterVector::from_vec(
        vector.iter().map(|v| v + normal.sample(&mut rng)).collect(),
    ))
}

/// Simulation phase that produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Mobility,
    Offload,
    Cache,
    Train,
    Aggregate,
    Vertical,
    Broadcast,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Mobility => "mobility",
            Phase::Offload => "offload",
            Phase::Cache => "cache",
            Phase::Train => "train",
            Phase::Aggregate => "aggregate",
            Phase::Vertical => "vertical",
            Phase::Broadcast => "broadcast",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "mobility" => Phase::Mobility,
            "offload" => Phase::Offload,
            "cache" => Phase::Cache,
            "train" => Phase::Train,
            "aggregate" => Phase::Aggregate,
            "vertical" => Phase::Vertical,
            "broadcast" => Phase::Broadcast,
            other => return Err(format!("unknown phase {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Uplink,
    Downlink,
    D2d,
    Compute,
    /// A straggler left out of this round's aggregation.
    Drop,
    /// Samples lost when a device departs without a handover peer.
    DataLoss,
    /// A sampled cluster with no participants reused its previous aggregate.
    StaleCluster,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Uplink => "uplink",
            EventKind::Downlink => "downlink",
            EventKind::D2d => "d2d",
            EventKind::Compute => "compute",
            EventKind::Drop => "drop",
            EventKind::DataLoss => "data_loss",
            EventKind::StaleCluster => "stale_cluster",
        }
    }

    pub fn link(&self) -> Option<LinkKind> {
        match self {
            EventKind::Uplink => Some(LinkKind::Uplink),
            EventKind::Downlink => Some(LinkKind::Downlink),
            EventKind::D2d => Some(LinkKind::D2d),
            _ => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "uplink" => EventKind::Uplink,
            "downlink" => EventKind::Downlink,
            "d2d" => EventKind::D2d,
            "compute" => EventKind::Compute,
            "drop" => EventKind::Drop,
            "data_loss" => EventKind::DataLoss,
            "stale_cluster" => EventKind::StaleCluster,
            other => return Err(format!("unknown event kind {other:?}")),
        })
    }
}

/// One entry of the append-only event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub round: u64,
    pub phase: Phase,
    pub kind: EventKind,
    pub src: NodeId,
    pub dst: Option<NodeId>,
    pub params: u64,
    /// Energy charged to `src`.
    pub joules: f64,
    pub seconds: f64,
}

impl Event {
    /// A priced transfer of `params` parameters over `link`.
    pub fn transfer(
        round: u64,
        phase: Phase,
        link: &LinkModel,
        src: NodeId,
        dst: NodeId,
        params: u64,
    ) -> Self {
        let cost = transmission_cost(params, link);
        let kind = match link.kind {
            LinkKind::Uplink => EventKind::Uplink,
            LinkKind::Downlink => EventKind::Downlink,
            LinkKind::D2d => EventKind::D2d,
        };
        Self {
            round,
            phase,
            kind,
            src,
            dst: Some(dst),
            params,
            joules: cost.energy,
            seconds: cost.delay,
        }
    }

    pub fn marker(round: u64, phase: Phase, kind: EventKind, src: NodeId, params: u64) -> Self {
        Self {
            round,
            phase,
            kind,
            src,
            dst: None,
            params,
            joules: 0.0,
            seconds: 0.0,
        }
    }

    pub fn is_data_transfer(&self) -> bool {
        matches!(self.phase, Phase::Offload | Phase::Mobility | Phase::Cache)
            && self.kind.link().is_some()
    }
}

/// Cumulative accounting for one run (or one round, when reset per round).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ledger {
    /// Parameters per transferred sample (`feature_dim + 1`).
    pub sample_width: u64,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub d2d_params: u64,
    pub energy_joules: BTreeMap<NodeId, f64>,
    /// Sum of event energies in record order.
    pub total_energy_j: f64,
    pub stragglers_dropped: u64,
    /// Samples relocated by offloading or departure handover.
    pub data_samples_moved: u64,
    pub data_samples_lost: u64,
    pub stale_clusters: u64,
    pub round_delay_seconds: Vec<f64>,
}

impl Ledger {
    pub fn new(sample_width: u64) -> Self {
        Self {
            sample_width,
            ..Default::default()
        }
    }

    pub fn record(&mut self, event: &Event) {
        match event.kind {
            EventKind::Uplink => self.uplink_params += event.params,
            EventKind::Downlink => self.downlink_params += event.params,
            EventKind::D2d => self.d2d_params += event.params,
            EventKind::Drop => self.stragglers_dropped += 1,
            EventKind::DataLoss => {
                self.data_samples_lost += event.params / self.sample_width.max(1)
            }
            EventKind::StaleCluster => self.stale_clusters += 1,
            EventKind::Compute => {}
        }
        if event.kind == EventKind::D2d && matches!(event.phase, Phase::Offload | Phase::Mobility) {
            self.data_samples_moved += event.params / self.sample_width.max(1);
        }
        if event.joules != 0.0 {
            *self.energy_joules.entry(event.src).or_insert(0.0) += event.joules;
            self.total_energy_j += event.joules;
        }
    }

    pub fn total_params(&self) -> u64 {
        self.uplink_params + self.downlink_params + self.d2d_params
    }
}

/// Round delay under per-stage barriers: every stage waits for its slowest
/// member, and stages run back to back.
#[derive(Debug, Clone, Default)]
pub struct DelayTracker {
    stages: BTreeMap<(u32, u32, u32), f64>,
}

impl DelayTracker {
    /// `stage` orders the barrier; entries sharing a stage run in parallel.
    pub fn note(&mut self, stage: (u32, u32, u32), seconds: f64) {
        let slot = self.stages.entry(stage).or_insert(0.0);
        if seconds > *slot {
            *slot = seconds;
        }
    }

    pub fn total(&self) -> f64 {
        self.stages.values().sum()
    }

    pub fn stage_maxima(&self) -> Vec<f64> {
        self.stages.values().copied().collect()
    }
}
