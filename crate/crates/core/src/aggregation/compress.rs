use serde::{Deserialize, Serialize};

use super::AggregationError;
use crate::model::ParameterVector;

/// Upload compression. Top-k runs first, then the kept entries are uniformly
/// quantized to `2^bits` levels spanning their own `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    #[serde(default)]
    pub quantize_bits: Option<u32>,
    #[serde(default)]
    pub topk: Option<usize>,
}

impl CompressionConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, len: usize) -> Result<(), AggregationError> {
        if let Some(b) = self.quantize_bits {
            if !(1..=32).contains(&b) {
                return Err(AggregationError::InvalidCompression(format!(
                    "quantize_bits must be in 1..=32, got {b}"
                )));
            }
        }
        match self.topk {
            Some(0) => Err(AggregationError::InvalidCompression(
                "topk must be at least 1".into(),
            )),
            Some(k) if k > len => Err(AggregationError::TopkTooLarge { k, len }),
            _ => Ok(()),
        }
    }

    /// Parameters on the wire for a vector of length `len`.
    pub fn transmitted(&self, len: usize) -> usize {
        self.topk.unwrap_or(len).min(len)
    }
}

/// Returns the reconstructed vector the receiver will use and the number of
/// parameters transmitted.
pub fn compress(
    vector: &ParameterVector,
    cfg: &CompressionConfig,
) -> Result<(ParameterVector, usize), AggregationError> {
    let len = vector.len();
    cfg.validate(len)?;
    let kept: Vec<usize> = match cfg.topk {
        Some(k) if k < len => {
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| vector[b].abs().total_cmp(&vector[a].abs()).then(a.cmp(&b)));
            let mut kept = order[..k].to_vec();
            kept.sort_unstable();
            kept
        }
        _ => (0..len).collect(),
    };
    let mut out = vec![0.0; len];
    for &i in &kept {
        out[i] = vector[i];
    }
    if let Some(bits) = cfg.quantize_bits {
        let lo = kept
            .iter()
            .map(|&i| vector[i])
            .fold(f64::INFINITY, f64::min);
        let hi = kept
            .iter()
            .map(|&i| vector[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let levels = ((1u64 << bits) - 1) as f64;
            let step = (hi - lo) / levels;
            for &i in &kept {
                let q = ((vector[i] - lo) / step).round().clamp(0.0, levels);
                out[i] = (lo + q * step).clamp(lo, hi);
            }
        }
    }
    Ok((ParameterVector::from_vec(out), kept.len()))
}
