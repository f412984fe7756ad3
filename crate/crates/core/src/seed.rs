//! Sub-seed derivation.
//!
//! One global `u64` seed fans out to independent streams. The sub-seed for
//! a domain tag is the first eight bytes (little-endian) of
//! `SHA-256(seed.to_le_bytes() || tag)`, so each pipeline stage can be
//! rerun in isolation and still see the same random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Uniform value in `[0, 1)` determined by `(seed, key)`; used for
/// reproducible hash splits.
pub fn unit_hash(seed: u64, key: &str) -> f64 {
    (derive_seed(seed, key) >> 11) as f64 / (1u64 << 53) as f64
}
