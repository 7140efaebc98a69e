//! Seeding helpers. Every operation owns a generator built from an explicit
//! 64-bit seed; sub-streams (replicas, paths) are derived with [`mix_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer applied to `seed ^ golden * (stream + 1)`.
///
/// Stream `r` of seed `s` is a pure function of `(s, r)`, so replica
/// results do not depend on scheduling order.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    rng_from_seed(mix_seed(seed, stream))
}
