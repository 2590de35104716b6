//! Seed splitting.
//!
//! Every random stream in a run is derived from the master seed and a path of
//! tags, e.g. `[seed, ENV, env_index, agent]`. Derivation folds each tag into
//! the state with the SplitMix64 finalizer, so sibling streams are
//! decorrelated and a stream never depends on how many values another stream
//! consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tag for action sampling in training rollouts.
pub const ACTIONS: u64 = 0xA1;
/// Stream tag for network initialization.
pub const INIT: u64 = 0xB2;
/// Stream tag for environment resets.
pub const ENV: u64 = 0xC3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a master seed and a path of tags.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
