//! Named random streams derived from a single master seed.
//!
//! Every source of randomness in a run (data generation, splitting, weight
//! init, batch order, teacher noise, ...) draws from its own stream, derived
//! from `(master_seed, label)`. Changing how one stream is consumed can never
//! shift the values another stream produces.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for the stream named `label` under `master` seed.
pub fn stream_rng(master: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derived sub-seed for APIs that take a plain `u64` seed.
pub fn stream_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
