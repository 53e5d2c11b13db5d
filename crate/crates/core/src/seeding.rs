//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from one base seed plus a small
//! set of tags, so episodes can be evaluated in any order (or in parallel)
//! and still reproduce bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the independent random streams of one episode.
pub mod stream {
    /// Dynamics noise and observation noise.
    pub const ENV: u64 = 0x656e_7600;
    /// Action sampling.
    pub const POLICY: u64 = 0x706f_6c00;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, order-sensitively.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
