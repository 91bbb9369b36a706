//! Named-stream seed derivation.
//!
//! All randomness in a run flows from the config seed through named streams,
//! one per (purpose, key) pair, so concurrent task order cannot affect
//! results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from the root seed, a purpose label, and a key
/// (typically a problem id).
pub fn derive_seed(root: u64, purpose: &str, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(purpose.as_bytes());
    hasher.update([0x1f]);
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// RNG for a named stream.
pub fn stream_rng(root: u64, purpose: &str, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, key))
}
