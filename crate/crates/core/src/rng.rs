//! Seed plumbing. Every random draw in the crate comes from a ChaCha8 stream
//! addressed by `(seed, stream)`, so independent components never share draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const COVARIATES: u64 = 1;
    pub const TREATMENT: u64 = 2;
    pub const EVENTS: u64 = 3;
    pub const CENSORING: u64 = 4;
    pub const CONTINUOUS_OUTCOME: u64 = 5;
    pub const ORACLE: u64 = 6;
    pub const SEARCH: u64 = 7;
    pub const POLICY: u64 = 8;
    pub const SPLIT: u64 = 9;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of replication `index` under `base`. Train and test cohorts of a
/// replication use `derive(derive(base, index), 0)` and `derive(.., 1)`.
pub fn derive(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
