//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every stochastic site in the pipeline (augmentation of one image in one
//! epoch, dropout in one batch, the shuffle of one epoch, parameter init of
//! one fold) gets its own ChaCha stream whose seed is derived from the global
//! seed plus a purpose tag and integer coordinates. Processing order can then
//! never change a draw.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from the global seed, a purpose tag, and coordinates.
///
/// SHA-256 keeps streams independent regardless of how tags/coordinates are
/// chosen; the first eight little-endian bytes of the digest become the seed.
pub fn derive_seed(global: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update([tag.len() as u8]);
    hasher.update(tag.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Stable 64-bit hash of a string id (dataset item ids are strings).
pub fn hash_id(id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// The RNG used everywhere in this crate.
pub type Rng = ChaCha8Rng;

/// An RNG seeded from `derive_seed`.
pub fn rng_for(global: u64, tag: &str, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(global, tag, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(derive_seed(7, "aug", &[1, 2]), derive_seed(7, "aug", &[1, 2]));
        assert_ne!(derive_seed(7, "aug", &[1, 2]), derive_seed(7, "aug", &[2, 1]));
        assert_ne!(derive_seed(7, "aug", &[1]), derive_seed(7, "init", &[1]));
        assert_ne!(derive_seed(7, "aug", &[1]), derive_seed(8, "aug", &[1]));
    }

    #[test]
    fn streams_reproduce() {
        let mut a = rng_for(42, "test", &[3]);
        let mut b = rng_for(42, "test", &[3]);
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn id_hash_is_stable_across_calls() {
        assert_eq!(hash_id("benign/img (1).png"), hash_id("benign/img (1).png"));
        assert_ne!(hash_id("a"), hash_id("b"));
    }
}
