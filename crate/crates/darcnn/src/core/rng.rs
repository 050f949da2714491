//! Deterministic named RNG substreams.
//!
//! All randomness flows from the single config seed. Substreams are keyed by
//! a purpose string (and optionally an index), so parallel and serial
//! execution agree and checkpoint resume reproduces the exact stream for any
//! absolute step.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream for a named purpose.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    substream_indexed(seed, name, 0)
}

/// Stream for a named purpose at an index (sample index, step number, epoch).
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
