//! Keyed random streams.
//!
//! Every stochastic draw in the simulator is taken from a ChaCha stream whose
//! seed is derived from the master seed plus a list of keys (tag, round,
//! device id, ...). Draws therefore never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream tags. Distinct tags keep independent consumers from sharing draws.
pub mod tag {
    pub const USER: u64 = 1;
    pub const DEVICE: u64 = 2;
    pub const AVAILABILITY: u64 = 3;
    pub const USAGE: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const FOREST: u64 = 6;
    pub const GA: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const INIT: u64 = 9;
    pub const CSFL_PICK: u64 = 10;
    pub const SL_ORDER: u64 = 11;
    pub const PROFILING: u64 = 12;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a key path into a new 64-bit seed.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, keys))
}
