//! Seeded random sources.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`] derived from the
//! run seed and a purpose label, so adding a new consumer never shifts the
//! stream seen by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent 64-bit seed from a parent seed and a label path.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, labels: &[&str]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, labels))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
