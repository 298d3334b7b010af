//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a small tuple of indices, so results do not
//! depend on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

// Stream tags.
pub const TAG_INIT: u64 = 1;
pub const TAG_CLASS_MEANS: u64 = 2;
pub const TAG_DOMAIN: u64 = 3;
pub const TAG_TRAIN: u64 = 4;
pub const TAG_TEST: u64 = 5;
pub const TAG_PRETRAIN_POOL: u64 = 6;
pub const TAG_BATCH: u64 = 7;
pub const TAG_PRETRAIN_BATCH: u64 = 8;
