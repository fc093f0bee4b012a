//! Deterministic seed streams.
//!
//! Every random draw in a run comes from a ChaCha generator whose seed is
//! derived from the experiment seed plus a tuple of tags (stream, round,
//! participant). Results therefore do not depend on worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SPLIT: u64 = 2;
pub(crate) const STREAM_SHARD: u64 = 3;
pub(crate) const STREAM_SYNTH: u64 = 4;
pub(crate) const STREAM_SELECT: u64 = 5;
pub(crate) const STREAM_LOCAL: u64 = 6;
pub(crate) const STREAM_ANNEAL: u64 = 7;
pub(crate) const STREAM_BALANCE: u64 = 8;
pub(crate) const STREAM_CENTRAL: u64 = 9;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, producing an independent-looking child seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

/// Seed of the step that follows a step seeded with `seed`.
///
/// Local training seeds step `i + 1` with `chain_seed` of step `i`, so
/// running `tau = a` then `tau = b` from the chained seed equals one run of
/// `tau = a + b`.
pub fn chain_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x5eed_c4a1_2b3d_9f01)
}

pub fn rng_from(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
