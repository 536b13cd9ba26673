//! Seed derivation.
//!
//! Every random draw in the simulator comes from a ChaCha stream whose seed is
//! derived from `(base seed, tag, round, ...)`. Changing how one phase uses
//! randomness therefore never shifts the stream of another phase.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the determinism contract: changing one
/// changes every output that depends on it.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const TOPOLOGY: u64 = 2;
    pub const TRUST: u64 = 3;
    pub const REDRAW: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const CONSENSUS: u64 = 6;
    pub const VERTICAL_NOISE: u64 = 7;
    pub const MOBILITY: u64 = 8;
    pub const CACHE: u64 = 9;
    pub const SLOW_DEVICES: u64 = 10;
    pub const TEST_SET: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a base seed together with an ordered list of components.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}
