//! Seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by a 64-bit seed.
//! Independent streams for different purposes (trajectory sampling, network
//! initialisation, bootstrap resampling, ...) are derived from one base seed
//! with a counter-based splitter: `derive(base, purpose, index)` hashes the
//! three words through SplitMix64. The result depends only on its arguments,
//! never on how work was scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod purpose {
    pub const TRAJECTORY: u64 = 0x7472_616a;
    pub const INIT: u64 = 0x696e_6974;
    pub const BOOTSTRAP: u64 = 0x626f_6f74;
    pub const COUPLING: u64 = 0x636f_7570;
    pub const BLOCKS: u64 = 0x626c_6f63;
    pub const CONCENTRATION: u64 = 0x636f_6e63;
    pub const PROBES: u64 = 0x7072_6f62;
    pub const KERNEL: u64 = 0x6b65_726e;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of stream `index` for `purpose` under `base`.
pub fn derive(base: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ purpose) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
