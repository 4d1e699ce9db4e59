//! Deterministic seed derivation.
//!
//! Every run hangs off a single root seed. Child seeds are derived by hashing
//! `(root, tag, index)` with SHA-256 so the mapping is stable across platforms
//! and releases, and so distinct stages/patients/epochs never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a root seed, a stage tag and an index.
pub fn child_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Two-level derivation for per-(a, b) streams, e.g. (sample, epoch).
pub fn child_seed2(root: u64, tag: &str, a: u64, b: u64) -> u64 {
    child_seed(child_seed(root, tag, a), tag, b)
}

/// The RNG used everywhere; explicit so streams are reproducible bit-for-bit.
pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
