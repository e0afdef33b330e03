//! Named sub-seed derivation.
//!
//! Every source of randomness in the pipeline draws from one global seed
//! through a named channel, e.g. `"mix"`, `"bracket:toy-017"`, or
//! `"presentation:toy-017:c1:c2"`. Derivation is content-addressed
//! (SHA-256), so sub-seeds are stable across processes, machines, and
//! compiler versions — never derived from process-local hasher state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive the sub-seed for a named randomness channel.
pub fn sub_seed(global_seed: u64, channel: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(channel.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A deterministic RNG seeded from a named channel.
pub fn channel_rng(global_seed: u64, channel: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(global_seed, channel))
}
