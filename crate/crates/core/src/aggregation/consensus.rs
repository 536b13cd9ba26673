use rand_distr::{Distribution, Normal};

use super::{build_mixing_matrix, AggregationError, MixingMatrix};
use crate::model::ParameterVector;
use crate::netmodel::NetError;
use crate::rng;
use crate::topology::{AggregationMode, Cluster};

/// One synchronous mixing step: `x'_i = sum_j M_ij x_j`.
pub fn consensus_round(
    states: &[ParameterVector],
    matrix: &MixingMatrix,
) -> Result<Vec<ParameterVector>, AggregationError> {
    let n = matrix.order();
    if states.len() != n {
        return Err(AggregationError::DimensionMismatch {
            states: states.len(),
            order: n,
        });
    }
    let len = states.first().map_or(0, |s| s.len());
    if let Some(s) = states.iter().find(|s| s.len() != len) {
        return Err(AggregationError::LengthMismatch {
            expected: len,
            found: s.len(),
        });
    }
    Ok((0..n)
        .map(|i| {
            let mut out = vec![0.0; len];
            for (j, &m) in matrix.row(i).iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(states[j].iter()) {
                    *o += m * x;
                }
            }
            ParameterVector::from_vec(out)
        })
        .collect())
}

/// Runs `rounds` mixing steps over the cluster's D2D graph. When
/// `noise_sigma > 0` every message a node receives from a neighbor carries
/// fresh zero-mean Gaussian noise. Returns the final states and the number of
/// vector messages sent (`rounds * 2 * edges`).
pub fn consensus_aggregate(
    cluster: &Cluster,
    states: &[ParameterVector],
    rounds: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Vec<ParameterVector>, usize), AggregationError> {
    if cluster.mode != AggregationMode::D2dConsensus {
        return Err(AggregationError::NotConsensus(cluster.id));
    }
    if rounds < 1 {
        return Err(AggregationError::ZeroRounds);
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(NetError::InvalidSigma(noise_sigma).into());
    }
    let matrix = build_mixing_matrix(&cluster.d2d)?;
    let n = matrix.order();
    if states.len() != n {
        return Err(AggregationError::DimensionMismatch {
            states: states.len(),
            order: n,
        });
    }
    let messages = rounds * 2 * cluster.d2d.edge_count();
    if n == 1 {
        return Ok((states.to_vec(), 0));
    }
    let mut current = states.to_vec();
    if noise_sigma == 0.0 {
        for _ in 0..rounds {
            current = consensus_round(&current, &matrix)?;
        }
        return Ok((current, messages));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|_| NetError::InvalidSigma(noise_sigma))?;
    let mut rng = rng::stream(seed, &[]);
    let len = current[0].len();
    for _ in 0..rounds {
        let next: Vec<ParameterVector> = (0..n)
            .map(|i| {
                let mut out: Vec<f64> = current[i].iter().map(|x| matrix.get(i, i) * x).collect();
                for j in cluster.d2d.neighbors(i) {
                    let m = matrix.get(i, j);
                    for (k, o) in out.iter_mut().enumerate().take(len) {
                        *o += m * (current[j][k] + normal.sample(&mut rng));
                    }
                }
                ParameterVector::from_vec(out)
            })
            .collect();
        current = next;
    }
    Ok((current, messages))
}
