//! Seeding conventions.
//!
//! All randomness comes from ChaCha8 streams (`rand_chacha::ChaCha8Rng`)
//! created with `seed_from_u64`. Sub-streams are derived by mixing a parent
//! seed with a tag through SplitMix64, so a run is reproducible from its
//! top-level seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a named purpose (`tag`) and an index within it.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(tag)) ^ index)
}

/// Seed that depends only on `seed` and the exact bit pattern of `values`.
///
/// Used wherever identical inputs must see identical random streams
/// regardless of their position (duplicate points, duplicate minibatches).
pub fn content_seed(seed: u64, values: &[f64]) -> u64 {
    let mut h = mix64(seed);
    for v in values {
        h = mix64(h ^ v.to_bits());
    }
    h
}

pub mod tags {
    pub const MODEL_INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const RANDOM_SELECT: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const SELECTION_AUGMENT: u64 = 8;
    pub const DATA: u64 = 9;
    pub const PROBE: u64 = 10;
}
