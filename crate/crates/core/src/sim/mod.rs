//! The round loop, its configuration and the comparison baselines.
//!
//! One global round runs these phases in order:
//!
//! 1. mobility events at the round boundary;
//! 2. leaf-cluster sampling;
//! 3. inter-layer caching (first round only) and D2D offloading;
//! 4. local training, then the straggler deadline;
//! 5. cluster aggregation up to each block head;
//! 6. vertical transmission for blocks that are due, then broadcast;
//! 7. evaluation of the root model and one [`MetricsRow`].
//!
//! Steps 4 and 5 repeat `intra_rounds` times per block. Every parent combines
//! the most recent aggregate of each of its child clusters, so clusters that
//! sat out a round still count with what they last reported.

mod baselines;
mod config;
mod engine;
mod schedule;

use thiserror::Error;

use crate::aggregation::AggregationError;
use crate::exchange::ExchangeError;
use crate::model::{ModelError, ParameterVector};
use crate::netmodel::{Event, Ledger, NetError, Phase};
use crate::topology::TopologyError;

pub use baselines::{run_baselines, run_centralized, run_star, star_config, Baselines};
pub use config::{
    BaselineConfig, BlockConfig, BlockSpec, ComputeConfig, ConfigViolation, ConsensusConfig,
    DataConfig, SamplingConfig, SimulationConfig, TrainingConfig,
};
pub use engine::run_simulation;
pub use schedule::{build_blocks, sample_clusters, schedule_round, BlockAction, LearningBlock};

/// One output record per global round. Counters are this round's totals.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub global_loss: f64,
    pub global_accuracy: f64,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub d2d_params: u64,
    pub total_energy_j: f64,
    pub round_delay_s: f64,
    pub stragglers_dropped: u64,
    pub clusters_sampled: u64,
    pub samples_moved: u64,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 11] = [
        "round",
        "global_loss",
        "global_accuracy",
        "uplink_params",
        "downlink_params",
        "d2d_params",
        "total_energy_j",
        "round_delay_s",
        "stragglers_dropped",
        "clusters_sampled",
        "samples_moved",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub rows: Vec<MetricsRow>,
    pub final_params: ParameterVector,
    pub events: Vec<Event>,
    /// Mean consensus error over the round's consensus clusters, if any ran.
    pub consensus_error: Vec<Option<f64>>,
    /// Totals over the whole run.
    pub ledger: Ledger,
}

impl SimulationOutput {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("at least one row")
    }

    pub fn final_consensus_error(&self) -> Option<f64> {
        self.consensus_error.iter().rev().find_map(|e| *e)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{0}")]
    Schedule(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration:\n{}", format_violations(.0))]
    InvalidConfig(Vec<ConfigViolation>),
    #[error("setup failed: {0}")]
    Setup(StepError),
    #[error("round {round}, phase {phase}: {cause}")]
    Round {
        round: u64,
        phase: Phase,
        cause: StepError,
    },
}

fn format_violations(v: &[ConfigViolation]) -> String {
    v.iter()
        .map(|v| format!("  {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}
