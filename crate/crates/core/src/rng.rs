//! Seed derivation.
//!
//! Every random stream in the engine is derived from one root seed and a
//! short path of tags, so that subsystems never share generator state and a
//! stream's contents do not depend on how many values another stream drew.
//!
//! `derive(seed, &[tag, a, b])` mixes the path with splitmix64 and seeds a
//! ChaCha8 generator with the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod tags {
    pub const SAMPLER: u64 = 0x5341_4d50;
    pub const TRAINER: u64 = 0x5452_4149;
    pub const SCENE: u64 = 0x5343_454e;
    pub const INIT_NOISE: u64 = 0x494e_4954;
    pub const KNOWN_NOISE: u64 = 0x4b4e_4f57;
    pub const PERMUTE: u64 = 0x5045_524d;
    pub const DEPTH: u64 = 0x4445_5054;
    pub const UPDATE: u64 = 0x5550_4454;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a seed with a path of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn derive(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}
