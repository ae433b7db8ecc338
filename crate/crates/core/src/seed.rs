//! Seed derivation. Every random stream in a run is keyed off one base seed
//! and a stream tag so that runs are reproducible and streams independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(mix(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream tags.
pub mod stream {
    pub const DATA_LABELED: u64 = 1;
    pub const DATA_UNLABELED: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const SPLIT_LABELED: u64 = 10;
    pub const SPLIT_FOLDS: u64 = 11;
    pub const SUBSAMPLE: u64 = 12;
    pub const INIT: u64 = 20;
    pub const BATCHES: u64 = 21;
    pub const CONTRASTIVE: u64 = 22;
}
