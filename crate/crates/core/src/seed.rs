//! Deterministic seed derivation.
//!
//! Independent random streams are derived from a base seed and a tag with
//! SplitMix64, so adding a new consumer never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes.
pub fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ splitmix64(tag_hash(tag)))
}

pub fn derive_idx(seed: u64, tag: &str, idx: u64) -> u64 {
    splitmix64(derive(seed, tag) ^ splitmix64(idx.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng(seed: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, tag))
}

pub fn rng_idx(seed: u64, tag: &str, idx: u64) -> Rng {
    Rng::seed_from_u64(derive_idx(seed, tag, idx))
}
