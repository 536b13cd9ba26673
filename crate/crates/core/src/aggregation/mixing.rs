use super::AggregationError;
use crate::topology::Adjacency;

/// Dense doubly stochastic matrix over a cluster's members.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl MixingMatrix {
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Builds a matrix from raw rows without checking any invariant.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self {
            n: rows.len(),
            entries: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }
}

/// Lazy Metropolis–Hastings weights: `m_ij = 1 / (1 + max(deg_i, deg_j))` on
/// edges, the diagonal takes the remainder, then `M' = (M + I) / 2`.
pub fn build_mixing_matrix(adjacency: &Adjacency) -> Result<MixingMatrix, AggregationError> {
    let n = adjacency.len();
    if n == 0 {
        return Err(AggregationError::EmptyCluster);
    }
    if !adjacency.is_connected() {
        return Err(AggregationError::Disconnected);
    }
    let degree: Vec<usize> = (0..n).map(|i| adjacency.degree(i)).collect();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        let mut off = 0.0;
        for j in adjacency.neighbors(i) {
            let w = 1.0 / (1 + degree[i].max(degree[j])) as f64;
            entries[i * n + j] = 0.5 * w;
            off += w;
        }
        entries[i * n + i] = 0.5 * (1.0 - off) + 0.5;
    }
    Ok(MixingMatrix { n, entries })
}
