//! Deterministic simulator for multi-layer fog learning.
//!
//! Devices at the bottom of a tree train a multinomial logistic regression
//! model on local data. Parameters travel upward through clusters, either
//! through the cluster's parent (server-side averaging) or through in-cluster
//! device-to-device average consensus with a single uploader. Every transfer
//! is priced by a link model and written to an append-only event log so that
//! traffic, energy and delay can be replayed independently of the simulator.
//!
//! Module map:
//!
//! * [`model`]: parameter vectors, datasets, gradient descent, evaluation and
//!   synthetic non-IID partitions.
//! * [`topology`]: the layered fog tree, D2D and trust graphs, mobility.
//! * [`aggregation`]: weighted averaging, mixing matrices, consensus,
//!   compression and the hierarchical upward pass.
//! * [`exchange`]: D2D dataset offloading and inter-layer caching.
//! * [`netmodel`]: link/compute costs, stragglers, channel noise, ledgers.
//! * [`sim`]: configuration, round scheduling, the simulation loop and
//!   baselines.
//! * [`report`]: CSV/event-log serialization, config hashing and replay.

pub mod aggregation;
pub mod exchange;
pub mod model;
pub mod netmodel;
pub mod report;
pub mod rng;
pub mod sim;
pub mod topology;

pub use aggregation::{AggregationError, CompressionConfig, MixingMatrix};
pub use exchange::{Cache, ExchangeError, OffloadPlan};
pub use model::{Dataset, LossReport, ModelError, ParameterVector, Sample};
pub use netmodel::{
    ComputeProfile, CostModel, Event, EventKind, Ledger, LinkKind, LinkModel, Phase,
};
pub use sim::{MetricsRow, SimError, SimulationConfig, SimulationOutput};
pub use topology::{
    AggregationMode, Cluster, ClusterId, FogTree, LayerSpec, NodeId, TopologyError,
};
