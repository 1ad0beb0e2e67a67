//! Seed derivation for reproducible parallel simulation.
//!
//! Every random draw comes from a ChaCha8 generator keyed by a 64-bit seed and
//! a stream number, so each subject (and each replicate) owns an independent
//! stream regardless of which thread processes it. Replicate `r` of a run
//! seeded with `s` uses the seed `splitmix64(s + r)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the SplitMix64 finalizer; a bijection on `u64`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `replicate` of a run seeded with `seed`.
pub fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    splitmix64(seed.wrapping_add(replicate))
}

/// Generator for stream `stream` (typically a subject index) under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
