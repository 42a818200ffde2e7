//! Seed derivation.
//!
//! Every consumer of randomness gets its own ChaCha8 stream whose seed is the
//! first eight bytes (little-endian) of `SHA-256(seed.to_le_bytes() ++ label)`.
//! Labels are fixed strings such as `"synthetic/means"` or `"stage/train"`, so
//! adding a consumer never perturbs the streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
