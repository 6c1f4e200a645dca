//! Counter-derived RNG streams.
//!
//! Every random decision in the pipeline draws from a stream keyed by the
//! master seed, a purpose tag and optional counters, so a run can be
//! reproduced piecewise without replaying unrelated draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, tag: &str, counters: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for c in counters {
        h.update(c.to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// A child seed for a sub-stage.
pub fn derive_seed(seed: u64, tag: &str, counters: &[u64]) -> u64 {
    use rand::RngCore;
    stream(seed, tag, counters).next_u64()
}

/// Hex SHA-256 of a byte string; used for manifests and config hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
