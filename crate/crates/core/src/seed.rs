//! Derived seeds for reproducible parallel work.
//!
//! Every random stream in the crate is seeded from a master seed plus a
//! path of integer tags, so results do not depend on worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed`; distinct tag paths give independent seeds.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

// Stream tags.
pub const TAG_SCENARIO: u64 = 1;
pub const TAG_OFFSET: u64 = 2;
pub const TAG_NOISE: u64 = 3;
pub const TAG_TRIAL: u64 = 4;
pub const TAG_POOL: u64 = 5;
pub const TAG_WIND: u64 = 6;
pub const TAG_TRAIN: u64 = 7;
