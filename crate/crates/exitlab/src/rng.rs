//! Deterministic random number generation.
//!
//! Every stochastic component derives its own stream from a root seed and a
//! string label, so runs are reproducible regardless of evaluation order and
//! independent streams never alias.

use rand::SeedableRng;
use sha2::{Digest, Sha256};

/// The one RNG used throughout the crate. Counter-based, so independently
/// seeded streams are cheap and platform-stable.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Derives a child seed from `root` and a purpose label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}

/// Derives a child seed for the `index`-th element of a labelled family
/// (one clip, one episode stream, one evaluation seed, ...).
pub fn derive_seed_indexed(root: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}

/// Builds an [`Rng`] for a labelled stream.
pub fn seeded(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label))
}

/// Builds an [`Rng`] for the `index`-th element of a labelled family.
pub fn seeded_indexed(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed_indexed(root, label, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "clips");
        let b = derive_seed(7, "clips");
        let c = derive_seed(7, "policy");
        let d = derive_seed(8, "clips");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn indexed_streams_do_not_alias() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            assert!(seen.insert(derive_seed_indexed(42, "clip", i)));
        }
    }
}
