//! Trainable model, datasets and synthetic data.
//!
//! The model is multinomial logistic regression without bias terms. Its
//! parameters are stored class-major in one flat [`ParameterVector`] of
//! length `G = feature_dim * class_count`: entries `c*d .. (c+1)*d` hold the
//! weights of class `c`.

mod data;
mod logistic;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

pub use data::{
    distribution_similarity, generate_partitions, label_histogram, total_variation, PartitionSpec,
    Partitions,
};
pub use logistic::{
    centralized_train, compute_gradient, evaluate, init_model, local_update, LocalUpdate,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient requested on an empty batch")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("parameter length {params} is incompatible with feature dimension {feature_dim}")]
    ShapeMismatch { params: usize, feature_dim: usize },
    #[error("sample has {found} features, expected {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("label {label} outside [0, {class_count})")]
    LabelOutOfRange { label: usize, class_count: usize },
}

/// Flat model parameters. The length is fixed when the vector is created; the
/// mutable view is a slice, so no operation can resize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance to `other`. Panics on length mismatch.
    pub fn distance(&self, other: &ParameterVector) -> f64 {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// Ordered sample collection. `owner` is `None` for pooled or test sets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub owner: Option<NodeId>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(owner: Option<NodeId>, samples: Vec<Sample>) -> Self {
        Self { owner, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenates datasets in iteration order into an ownerless pool.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let samples = parts
            .into_iter()
            .flat_map(|d| d.samples.iter().cloned())
            .collect();
        Dataset::new(None, samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub accuracy: f64,
    pub sample_count: usize,
}

/// Dimensions of the logistic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub feature_dim: usize,
    pub class_count: usize,
}

impl ModelShape {
    pub fn new(feature_dim: usize, class_count: usize) -> Result<Self, ModelError> {
        if feature_dim < 1 {
            return Err(ModelError::InvalidConfig(
                "feature_dim must be at least 1".into(),
            ));
        }
        if class_count < 2 {
            return Err(ModelError::InvalidConfig(
                "class_count must be at least 2".into(),
            ));
        }
        Ok(Self {
            feature_dim,
            class_count,
        })
    }

    /// Parameter vector length `G`.
    pub fn param_len(&self) -> usize {
        self.feature_dim * self.class_count
    }
}
