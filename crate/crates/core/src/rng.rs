//! Deterministic RNG stream derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from `(seed, salt, indices...)` via a SplitMix64 chain. Because a stream
//! is a pure function of those integers, any parallel schedule over samples
//! or batches reproduces the single-threaded output byte for byte.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain-separation salts for derived streams.
pub mod salt {
    pub const PARAM_INIT: u64 = 0x9e3779b97f4a7c15;
    pub const DATASET_SAMPLE: u64 = 0xd1b54a32d192ed03;
    pub const AUGMENT: u64 = 0x2545f4914f6cdd1d;
    pub const DROPOUT: u64 = 0x9e6c63d0876a9a47;
    pub const SHUFFLE: u64 = 0xbf58476d1ce4e5b9;
}

/// SplitMix64 finalizer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds `seed` and `parts` into a single well-mixed 64-bit value.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// A ChaCha8 stream keyed by `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}
