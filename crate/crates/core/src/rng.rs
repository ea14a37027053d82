//! Labeled seed derivation. Every stochastic component draws from a stream
//! keyed by the experiment seed plus a purpose label, so adding a new
//! consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hashes `(seed, labels...)` to a 64-bit sub-seed.
pub fn derive(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

pub fn stream(seed: u64, labels: &[&str]) -> Rng {
    Rng::seed_from_u64(derive(seed, labels))
}
