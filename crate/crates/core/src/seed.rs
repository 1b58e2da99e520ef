//! Seed derivation for independent, order-free random streams.

use sha2::{Digest, Sha256};

/// Deterministic child seed from a base seed, a tag and an index.
///
/// Jobs and pipeline stages each get their own stream, so results never
/// depend on scheduling order or on which other stages are enabled.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
