use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;

use super::config::BlockConfig;
use crate::rng::{self, tag};
use crate::topology::{ClusterId, FogTree, NodeId};

/// A subtree whose head nodes send upward every `vertical_period` rounds and
/// run `intra_rounds` local-update/in-block-aggregation passes per round.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningBlock {
    pub id: usize,
    pub heads: Vec<NodeId>,
    pub head_layer: usize,
    /// Every cluster below the heads, in id order.
    pub clusters: Vec<ClusterId>,
    pub vertical_period: usize,
    pub intra_rounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockAction {
    IntraOnly,
    IntraAndVertical,
}

/// A block sends upward in rounds divisible by its period.
pub fn schedule_round(blocks: &[LearningBlock], round: u64) -> Vec<BlockAction> {
    blocks
        .iter()
        .map(|b| {
            if round.is_multiple_of(b.vertical_period.max(1) as u64) {
                BlockAction::IntraAndVertical
            } else {
                BlockAction::IntraOnly
            }
        })
        .collect()
}

/// Draws `max(1, round(fraction * count))` leaf clusters without replacement.
/// The result is sorted by id.
pub fn sample_clusters(
    leaf_clusters: &[ClusterId],
    fraction: f64,
    seed: u64,
    round: u64,
) -> Result<Vec<ClusterId>, String> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(format!(
            "sampling fraction must be in (0, 1], got {fraction}"
        ));
    }
    let n = leaf_clusters.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return Ok(leaf_clusters.to_vec());
    }
    let mut rng = rng::stream(seed, &[tag::SAMPLING, round]);
    let mut picked: Vec<ClusterId> = index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| leaf_clusters[i])
        .collect();
    picked.sort();
    Ok(picked)
}

fn head_at(tree: &FogTree, node: NodeId, layer: usize) -> Option<NodeId> {
    let mut cur = node;
    loop {
        let info = tree.node(cur)?;
        if info.layer == layer {
            return Some(cur);
        }
        if info.layer > layer {
            return None;
        }
        cur = info.parent?;
    }
}

/// Resolves the block configuration against a tree. Blocks must partition the
/// leaves.
pub fn build_blocks(tree: &FogTree, cfg: &BlockConfig) -> Result<Vec<LearningBlock>, String> {
    let top = tree.layer_count() - 1;
    let specs: Vec<(Vec<NodeId>, usize, usize)> = if cfg.custom.is_empty() {
        let layer = 1.min(top);
        tree.layer_nodes(layer)
            .into_iter()
            .map(|h| (vec![h], cfg.vertical_period, cfg.intra_rounds))
            .collect()
    } else {
        cfg.custom
            .iter()
            .map(|b| (b.heads.clone(), b.vertical_period, b.intra_rounds))
            .collect()
    };
    let mut blocks = Vec::with_capacity(specs.len());
    let mut owner: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (id, (heads, period, intra)) in specs.into_iter().enumerate() {
        let mut layer = None;
        for h in &heads {
            let info = tree
                .node(*h)
                .ok_or(format!("block {id}: unknown head node {h}"))?;
            if info.layer == 0 {
                return Err(format!("block {id}: head {h} is a device"));
            }
            match layer {
                None => layer = Some(info.layer),
                Some(l) if l != info.layer => {
                    return Err(format!("block {id}: heads span several layers"));
                }
                _ => {}
            }
        }
        let head_layer = layer.ok_or(format!("block {id}: no heads"))?;
        let head_set: BTreeSet<NodeId> = heads.iter().copied().collect();
        for leaf in tree.leaves() {
            if head_at(tree, leaf, head_layer).is_some_and(|h| head_set.contains(&h)) {
                if let Some(prev) = owner.insert(leaf, id) {
                    return Err(format!("device {leaf} is in blocks {prev} and {id}"));
                }
            }
        }
        let clusters = tree
            .clusters()
            .iter()
            .filter(|c| c.layer < head_layer)
            .filter(|c| head_at(tree, c.parent, head_layer).is_some_and(|h| head_set.contains(&h)))
            .map(|c| c.id)
            .collect();
        blocks.push(LearningBlock {
            id,
            heads,
            head_layer,
            clusters,
            vertical_period: period.max(1),
            intra_rounds: intra.max(1),
        });
    }
    if let Some(leaf) = tree.leaves().into_iter().find(|l| !owner.contains_key(l)) {
        return Err(format!("device {leaf} belongs to no block"));
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::BlockSpec;
    use crate::topology::{build_tree, LayerSpec};

    fn block(period: usize) -> LearningBlock {
        LearningBlock {
            id: 0,
            heads: vec![],
            head_layer: 1,
            clusters: vec![],
            vertical_period: period,
            intra_rounds: 1,
        }
    }

    #[test]
    fn period_one_is_always_vertical() {
        for r in 1..10 {
            assert_eq!(
                schedule_round(&[block(1)], r),
                [BlockAction::IntraAndVertical]
            );
        }
    }

    #[test]
    fn period_four() {
        let due: Vec<u64> = (1..=12)
            .filter(|&r| schedule_round(&[block(4)], r)[0] == BlockAction::IntraAndVertical)
            .collect();
        assert_eq!(due, [4, 8, 12]);
    }

    #[test]
    fn mixed_periods_align_at_lcm() {
        let blocks = [block(2), block(3)];
        let both: Vec<u64> = (1..=20)
            .filter(|&r| {
                schedule_round(&blocks, r)
                    .iter()
                    .all(|a| *a == BlockAction::IntraAndVertical)
            })
            .collect();
        assert_eq!(both, [6, 12, 18]);
    }

    #[test]
    fn sampling_counts() {
        let ids: Vec<ClusterId> = (0..4).map(ClusterId).collect();
        assert_eq!(sample_clusters(&ids, 1.0, 3, 1).unwrap(), ids);
        let half = sample_clusters(&ids, 0.5, 3, 7).unwrap();
        assert_eq!(half.len(), 2);
        assert_eq!(half, sample_clusters(&ids, 0.5, 3, 7).unwrap());
        assert_eq!(sample_clusters(&ids, 0.01, 3, 1).unwrap().len(), 1);
        assert!(sample_clusters(&ids, 0.0, 3, 1).is_err());
        assert!(sample_clusters(&ids, 1.5, 3, 1).is_err());
    }

    #[test]
    fn default_blocks_follow_layer_one() {
        let tree = build_tree(
            &[
                LayerSpec::new(8, 2),
                LayerSpec::new(2, 2),
                LayerSpec::root(),
            ],
            0,
        )
        .unwrap();
        let blocks = build_blocks(&tree, &BlockConfig::default()).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks
            .iter()
            .all(|b| b.head_layer == 1 && b.clusters.len() == 2));
    }

    #[test]
    fn custom_blocks_must_partition() {
        let tree = build_tree(
            &[
                LayerSpec::new(8, 2),
                LayerSpec::new(2, 2),
                LayerSpec::root(),
            ],
            0,
        )
        .unwrap();
        let mid = tree.layer_nodes(1);
        let one = BlockConfig {
            custom: vec![BlockSpec {
                heads: vec![mid[0]],
                vertical_period: 2,
                intra_rounds: 1,
            }],
            ..BlockConfig::default()
        };
        assert!(build_blocks(&tree, &one).unwrap_err().contains("no block"));
        let both = BlockConfig {
            custom: vec![BlockSpec {
                heads: mid.clone(),
                vertical_period: 2,
                intra_rounds: 3,
            }],
            ..BlockConfig::default()
        };
        let blocks = build_blocks(&tree, &both).unwrap();
        assert_eq!(blocks[0].clusters.len(), 4);
        let root = BlockConfig {
            custom: vec![BlockSpec {
                heads: vec![tree.root()],
                vertical_period: 1,
                intra_rounds: 1,
            }],
            ..BlockConfig::default()
        };
        assert_eq!(build_blocks(&tree, &root).unwrap()[0].clusters.len(), 5);
    }
}
