use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggregation::CompressionConfig;
use crate::model::PartitionSpec;
use crate::netmodel::{ComputeProfile, CostModel};
use crate::topology::{build_tree, AggregationMode, D2dModel, LayerSpec, MobilitySpec, NodeId};

use super::schedule::build_blocks;

/// Synthetic task and data skew. The device count comes from the leaf layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples_per_device: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub dirichlet_alpha: f64,
    pub class_separation: f64,
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PartitionSpec::default();
        Self {
            samples_per_device: p.samples_per_device,
            feature_dim: p.feature_dim,
            class_count: p.class_count,
            dirichlet_alpha: p.dirichlet_alpha,
            class_separation: p.class_separation,
            test_samples: p.test_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub global_rounds: usize,
    pub local_steps: usize,
    pub learning_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            global_rounds: 50,
            local_steps: 5,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    pub rounds: usize,
    /// Noise on every received D2D message.
    pub noise_sigma: f64,
    /// Per-cluster aggregation mode, keyed by cluster id; overrides the
    /// layer's `d2d_enabled`.
    pub modes: BTreeMap<u32, AggregationMode>,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            noise_sigma: 0.0,
            modes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub fraction: f64,
    /// Devices of clusters left out of a round still train on their own
    /// model; they neither send nor receive.
    pub continue_unsampled: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            continue_unsampled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    /// Head nodes; all on one layer. The block is their combined subtree.
    pub heads: Vec<NodeId>,
    #[serde(default = "one_usize")]
    pub vertical_period: usize,
    #[serde(default = "one_usize")]
    pub intra_rounds: usize,
}

fn one_usize() -> usize {
    1
}

/// Learning blocks. Without `custom`, every layer-1 node heads its own block
/// with the shared period and intra-round count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub vertical_period: usize,
    pub intra_rounds: usize,
    pub custom: Vec<BlockSpec>,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            vertical_period: 1,
            intra_rounds: 1,
            custom: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeConfig {
    pub profile: ComputeProfile,
    /// Share of devices (rounded to the nearest count) that run slower.
    pub slow_fraction: f64,
    /// Slow devices process `1 / slowdown` as many samples per second.
    pub slowdown: f64,
    /// Starting energy of each device; uploader selection favors the device
    /// with the most left.
    pub battery_j: f64,
}

impl Default for ComputeConfig {
    fn default() -> Self {
        Self {
            profile: ComputeProfile::default(),
            slow_fraction: 0.0,
            slowdown: 1.0,
            battery_j: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub star: bool,
    pub centralized: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            star: true,
            centralized: true,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub seed: u64,
    /// Bottom (devices) to top (single root).
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default)]
    pub compression: CompressionConfig,
    /// Noise on uplink transmissions.
    #[serde(default)]
    pub uplink_noise_sigma: f64,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub blocks: BlockConfig,
    #[serde(default)]
    pub mobility: MobilitySpec,
    #[serde(default)]
    pub offloading: bool,
    /// Fraction of each device's data copied into its parent's cache in the
    /// first round; zero disables caching.
    #[serde(default)]
    pub cache_fraction: f64,
    /// Per-round compute deadline in seconds; stragglers are dropped.
    #[serde(default)]
    pub deadline: Option<f64>,
    #[serde(default)]
    pub compute: ComputeConfig,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub baselines: BaselineConfig,
}

/// One rule broken by a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl SimulationConfig {
    /// A small three-layer configuration: devices in clusters of
    /// `cluster_size` under `mid` fog nodes, one root.
    pub fn three_layer(devices: usize, cluster_size: usize, mid: usize) -> Self {
        Self {
            seed: 0,
            layers: vec![
                LayerSpec::new(devices, cluster_size),
                LayerSpec::new(mid, mid),
                LayerSpec::root(),
            ],
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            consensus: ConsensusConfig::default(),
            compression: CompressionConfig::none(),
            uplink_noise_sigma: 0.0,
            sampling: SamplingConfig::default(),
            blocks: BlockConfig::default(),
            mobility: MobilitySpec::default(),
            offloading: false,
            cache_fraction: 0.0,
            deadline: None,
            compute: ComputeConfig::default(),
            costs: CostModel::default(),
            baselines: BaselineConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn device_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.node_count)
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            device_count: self.device_count(),
            samples_per_device: self.data.samples_per_device,
            feature_dim: self.data.feature_dim,
            class_count: self.data.class_count,
            dirichlet_alpha: self.data.dirichlet_alpha,
            class_separation: self.data.class_separation,
            test_samples: self.data.test_samples,
        }
    }

    /// Parameters per transferred sample: features plus the label.
    pub fn sample_width(&self) -> u64 {
        self.data.feature_dim as u64 + 1
    }

    pub fn param_len(&self) -> usize {
        self.data.feature_dim * self.data.class_count
    }

    /// Every rule the configuration breaks, in field order.
    pub fn validate(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        let mut bad = |field: &str, message: String| {
            out.push(ConfigViolation {
                field: field.to_string(),
                message,
            })
        };
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();

        if self.layers.len() < 2 {
            bad(
                "layers",
                format!("need at least 2 layers, got {}", self.layers.len()),
            );
        }
        if let Some(top) = self.layers.last() {
            if top.node_count != 1 {
                bad("layers", "top layer must hold exactly one node".into());
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let f = |name: &str| format!("layers[{i}].{name}");
            if l.node_count == 0 {
                bad(&f("node_count"), "must be positive".into());
            }
            if l.cluster_size == 0 {
                bad(&f("cluster_size"), "must be positive".into());
            }
            if !(0.0..=1.0).contains(&l.trust_density) {
                bad(
                    &f("trust_density"),
                    format!("{} outside [0, 1]", l.trust_density),
                );
            }
            if let D2dModel::Random(p) = l.d2d_model {
                if !(0.0..=1.0).contains(&p) {
                    bad(
                        &f("d2d_model"),
                        format!("edge probability {p} outside [0, 1]"),
                    );
                }
            }
            if l.d2d_enabled && l.d2d_model == D2dModel::None && l.cluster_size > 1 {
                bad(
                    &f("d2d_model"),
                    "consensus clusters need a D2D graph".into(),
                );
            }
            if i + 1 < self.layers.len() && l.node_count > 0 && l.cluster_size > 0 {
                let clusters = l.node_count.div_ceil(l.cluster_size);
                if clusters < self.layers[i + 1].node_count {
                    bad(
                        &f("cluster_size"),
                        format!(
                            "{clusters} clusters cannot give every one of the {} nodes above a child",
                            self.layers[i + 1].node_count
                        ),
                    );
                }
            }
        }

        let d = &self.data;
        if d.samples_per_device == 0 {
            bad("data.samples_per_device", "must be positive".into());
        }
        if d.feature_dim == 0 {
            bad("data.feature_dim", "must be positive".into());
        }
        if d.class_count < 2 {
            bad(
                "data.class_count",
                format!("need at least 2 classes, got {}", d.class_count),
            );
        }
        if !positive(d.dirichlet_alpha) {
            bad(
                "data.dirichlet_alpha",
                format!("must be positive, got {}", d.dirichlet_alpha),
            );
        }
        if !nonneg(d.class_separation) {
            bad("data.class_separation", "must be non-negative".into());
        }
        if d.test_samples == 0 {
            bad("data.test_samples", "must be positive".into());
        }

        if self.training.local_steps == 0 {
            bad("training.local_steps", "must be at least 1".into());
        }
        if !positive(self.training.learning_rate) {
            bad(
                "training.learning_rate",
                format!("must be positive, got {}", self.training.learning_rate),
            );
        }

        if self.consensus.rounds == 0 {
            bad("consensus.rounds", "must be at least 1".into());
        }
        if !nonneg(self.consensus.noise_sigma) {
            bad("consensus.noise_sigma", "must be non-negative".into());
        }
        let cluster_total: usize = self
            .layers
            .iter()
            .take(self.layers.len().saturating_sub(1))
            .map(|l| {
                if l.cluster_size == 0 {
                    0
                } else {
                    l.node_count.div_ceil(l.cluster_size)
                }
            })
            .sum();
        for id in self.consensus.modes.keys() {
            if *id as usize >= cluster_total {
                bad("consensus.modes", format!("no cluster with id {id}"));
            }
        }

        if let Some(b) = self.compression.quantize_bits {
            if !(1..=32).contains(&b) {
                bad(
                    "compression.quantize_bits",
                    format!("must be in 1..=32, got {b}"),
                );
            }
        }
        match self.compression.topk {
            Some(0) => bad("compression.topk", "must be at least 1".into()),
            Some(k) if k > self.param_len() => bad(
                "compression.topk",
                format!("{k} exceeds the parameter length {}", self.param_len()),
            ),
            _ => {}
        }
        if !nonneg(self.uplink_noise_sigma) {
            bad("uplink_noise_sigma", "must be non-negative".into());
        }

        let f = self.sampling.fraction;
        if !(f > 0.0 && f <= 1.0) {
            bad("sampling.fraction", format!("must be in (0, 1], got {f}"));
        }

        if self.blocks.vertical_period == 0 {
            bad("blocks.vertical_period", "must be at least 1".into());
        }
        if self.blocks.intra_rounds == 0 {
            bad("blocks.intra_rounds", "must be at least 1".into());
        }
        for (i, b) in self.blocks.custom.iter().enumerate() {
            if b.heads.is_empty() {
                bad(
                    &format!("blocks.custom[{i}].heads"),
                    "must not be empty".into(),
                );
            }
            if b.vertical_period == 0 {
                bad(
                    &format!("blocks.custom[{i}].vertical_period"),
                    "must be at least 1".into(),
                );
            }
            if b.intra_rounds == 0 {
                bad(
                    &format!("blocks.custom[{i}].intra_rounds"),
                    "must be at least 1".into(),
                );
            }
        }

        let m = &self.mobility;
        if !nonneg(m.rate) {
            bad("mobility.rate", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&m.depart_probability) {
            bad("mobility.depart_probability", "must be in [0, 1]".into());
        }

        if !(0.0..=1.0).contains(&self.cache_fraction) {
            bad(
                "cache_fraction",
                format!("must be in [0, 1], got {}", self.cache_fraction),
            );
        }
        if let Some(dl) = self.deadline {
            if !positive(dl) {
                bad("deadline", format!("must be positive, got {dl}"));
            }
        }
        if self.offloading && self.deadline.is_none() {
            bad(
                "offloading",
                "needs a deadline to size device capacity".into(),
            );
        }

        let c = &self.compute;
        if !positive(c.profile.samples_per_second) {
            bad(
                "compute.profile.samples_per_second",
                "must be positive".into(),
            );
        }
        if !nonneg(c.profile.energy_per_sample_step) {
            bad(
                "compute.profile.energy_per_sample_step",
                "must be non-negative".into(),
            );
        }
        if !(0.0..=1.0).contains(&c.slow_fraction) {
            bad("compute.slow_fraction", "must be in [0, 1]".into());
        }
        if !(c.slowdown >= 1.0 && c.slowdown.is_finite()) {
            bad(
                "compute.slowdown",
                format!("must be at least 1, got {}", c.slowdown),
            );
        }
        if !c.battery_j.is_finite() {
            bad("compute.battery_j", "must be finite".into());
        }

        for (name, link) in [
            ("costs.uplink", &self.costs.uplink),
            ("costs.downlink", &self.costs.downlink),
            ("costs.d2d", &self.costs.d2d),
        ] {
            if let Err(e) = link.validate() {
                bad(name, e);
            }
        }

        // block layout depends on the built tree, so only check it once the
        // layer structure itself is sound
        if out
            .iter()
            .all(|v| !v.field.starts_with("layers") && !v.field.starts_with("blocks"))
        {
            match build_tree(&self.layers, self.seed) {
                Ok(tree) => {
                    if let Err(e) = build_blocks(&tree, &self.blocks) {
                        out.push(ConfigViolation {
                            field: "blocks.custom".into(),
                            message: e,
                        });
                    }
                }
                Err(e) => out.push(ConfigViolation {
                    field: "layers".into(),
                    message: e.to_string(),
                }),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(SimulationConfig::three_layer(8, 4, 2).validate().is_empty());
    }

    #[test]
    fn json_round_trip_and_minimal_form() {
        let cfg = SimulationConfig::three_layer(8, 4, 2);
        let back = SimulationConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let minimal =
            r#"{"layers":[{"node_count":4,"cluster_size":2},{"node_count":1,"cluster_size":1}]}"#;
        let parsed = SimulationConfig::from_json(minimal).unwrap();
        assert_eq!(parsed.training.global_rounds, 50);
        assert!(parsed.validate().is_empty());
    }

    #[test]
    fn overlapping_blocks_are_a_violation() {
        let mut cfg = SimulationConfig::three_layer(8, 4, 2);
        let mid = NodeId(8);
        cfg.blocks.custom = vec![
            BlockSpec {
                heads: vec![mid],
                vertical_period: 1,
                intra_rounds: 1,
            },
            BlockSpec {
                heads: vec![mid],
                vertical_period: 2,
                intra_rounds: 1,
            },
        ];
        let v = cfg.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "blocks.custom");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"layers":[{"node_count":1,"cluster_size":1}],"sampling":{"fracton":0.5}}"#;
        assert!(SimulationConfig::from_json(text).is_err());
    }

    #[test]
    fn every_violation_is_listed() {
        let mut cfg = SimulationConfig::three_layer(8, 4, 2);
        cfg.sampling.fraction = 0.0;
        cfg.training.learning_rate = -1.0;
        cfg.blocks.vertical_period = 0;
        let fields: Vec<String> = cfg.validate().into_iter().map(|v| v.field).collect();
        assert_eq!(
            fields,
            [
                "training.learning_rate",
                "sampling.fraction",
                "blocks.vertical_period"
            ]
        );
    }
}
