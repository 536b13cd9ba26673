use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ModelError, Sample};
use crate::rng::{self, tag};
use crate::topology::NodeId;

/// Parameters of the synthetic class-conditional Gaussian task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub device_count: usize,
    pub samples_per_device: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub dirichlet_alpha: f64,
    /// Standard deviation of the per-class mean coordinates.
    pub class_separation: f64,
    pub test_samples: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            device_count: 20,
            samples_per_device: 200,
            feature_dim: 10,
            class_count: 5,
            dirichlet_alpha: 1.0,
            class_separation: 1.0,
            test_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partitions {
    /// Device `i` is owned by `NodeId(i)`.
    pub devices: Vec<Dataset>,
    /// Class-balanced held-out set drawn from the same class conditionals.
    pub test: Dataset,
    pub class_means: Vec<Vec<f64>>,
}

fn draw_label_mix(rng: &mut impl Rng, alpha: f64, classes: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut mix: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = mix.iter().sum();
    if total > 0.0 && total.is_finite() {
        mix.iter_mut().for_each(|p| *p /= total);
    } else {
        // every gamma draw underflowed
        mix.iter_mut().for_each(|p| *p = 0.0);
        mix[rng.random_range(0..classes)] = 1.0;
    }
    mix
}

/// Largest-remainder apportionment of `total` items by `weights`; remainder
/// ties go to the lowest index.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn gaussian_sample(rng: &mut impl Rng, mean: &[f64], label: usize) -> Sample {
    let features = mean
        .iter()
        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
        .collect();
    Sample::new(features, label)
}

/// Draws per-device datasets whose label mixes follow Dirichlet(alpha) and a
/// class-balanced test set. Deterministic in `seed`.
pub fn generate_partitions(spec: &PartitionSpec, seed: u64) -> Result<Partitions, ModelError> {
    if !spec.dirichlet_alpha.is_finite() || spec.dirichlet_alpha <= 0.0 {
        return Err(ModelError::InvalidConfig(format!(
            "dirichlet_alpha must be positive, got {}",
            spec.dirichlet_alpha
        )));
    }
    if spec.device_count == 0 || spec.samples_per_device == 0 || spec.feature_dim == 0 {
        return Err(ModelError::InvalidConfig(
            "device_count, samples_per_device and feature_dim must be positive".into(),
        ));
    }
    if spec.class_count < 2 {
        return Err(ModelError::InvalidConfig(
            "class_count must be at least 2".into(),
        ));
    }
    let mut rng = rng::stream(seed, &[tag::DATA]);
    let class_means: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| spec.class_separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let devices = (0..spec.device_count)
        .map(|i| {
            let mix = draw_label_mix(&mut rng, spec.dirichlet_alpha, spec.class_count);
            let counts = apportion(&mix, spec.samples_per_device);
            let mut labels: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
                .collect();
            labels.shuffle(&mut rng);
            let samples = labels
                .into_iter()
                .map(|y| gaussian_sample(&mut rng, &class_means[y], y))
                .collect();
            Dataset::new(Some(NodeId(i as u32)), samples)
        })
        .collect();

    let mut test_rng = rng::stream(seed, &[tag::TEST_SET]);
    let test = Dataset::new(
        None,
        (0..spec.test_samples)
            .map(|i| {
                let y = i % spec.class_count;
                gaussian_sample(&mut test_rng, &class_means[y], y)
            })
            .collect(),
    );
    Ok(Partitions {
        devices,
        test,
        class_means,
    })
}

/// Normalized label frequencies, padded to `classes` entries.
pub fn label_histogram(data: &Dataset, classes: usize) -> Vec<f64> {
    let mut hist = vec![0.0; classes];
    for s in &data.samples {
        hist[s.label] += 1.0;
    }
    let n = data.len().max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    hist
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// One minus the total-variation distance between the label histograms.
pub fn distribution_similarity(local: &Dataset, global: &Dataset) -> Result<f64, ModelError> {
    if local.is_empty() || global.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let classes = local
        .samples
        .iter()
        .chain(&global.samples)
        .map(|s| s.label + 1)
        .max()
        .unwrap_or(1);
    let tv = total_variation(
        &label_histogram(local, classes),
        &label_histogram(global, classes),
    );
    Ok((1.0 - tv).clamp(0.0, 1.0))
}
