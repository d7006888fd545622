//! Seed derivation. Every random stream in the simulator is a ChaCha8 generator
//! keyed by a base seed mixed with a path of integers naming its purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `base` with each element of `path`; distinct paths give unrelated seeds.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, path: &[u64]) -> SimRng {
    rng_from_seed(derive_seed(base, path))
}

// Purpose tags used in seed paths.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const STREAMS: u64 = 2;
    pub const DATASET: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const CONSOLIDATE: u64 = 6;
    pub const GROW: u64 = 7;
    pub const EVAL: u64 = 8;
}
