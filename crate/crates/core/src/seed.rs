//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a
//! master seed mixed with a short list of tags, so independent consumers
//! (users, UAVs, channel pairs, trials) never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed`. Order matters.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

// Stream tags.
pub const TAG_USERS: u64 = 0x5553_4552;
pub const TAG_UAVS: u64 = 0x5541_5653;
pub const TAG_REPAIR: u64 = 0x5245_5041;
pub const TAG_CHANNEL: u64 = 0x4348_414E;
pub const TAG_PHASE_INIT: u64 = 0x5048_4153;
pub const TAG_BENCH: u64 = 0x4245_4E43;
pub const TAG_NO_SIM: u64 = 0x4E4F_5349;
