//! Deterministic seed derivation.
//!
//! All randomness in the toolkit flows from one root seed. Every consumer
//! (weight init, batch sampling, data synthesis, splits, ...) derives its own
//! stream by hashing the root with a string scope, so adding or reordering
//! consumers never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit sub-seed from `root` and a scope label.
pub fn derive(root: u64, scope: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(scope.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// RNG for a named consumer. ChaCha keeps the stream identical across
/// platforms and compiler versions.
pub fn rng(root: u64, scope: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(root, scope))
}
