//! Seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by a seed derived
//! from the run's master seed and a path of stream identifiers. Derivation is
//! SplitMix64 mixing, so a child seed depends only on its path and never on
//! execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the different consumers of randomness.
pub mod stream {
    pub const INIT_POLICY: u64 = 1;
    pub const INIT_VALUE: u64 = 2;
    pub const EPISODE: u64 = 3;
    pub const WINDOW: u64 = 4;
    pub const ES_NOISE: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a path of identifiers.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// The crate's PRNG: ChaCha with 8 rounds, portable across platforms.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
