//! Deterministic stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! root seed plus a list of string/integer tags, so independent components
//! (sampler steps, guidance branches, per-sample noise) get decorrelated
//! but reproducible streams.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from a root seed and a tag path.
pub fn derive_rng(seed: u64, tags: &[&str]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for tag in tags {
        hasher.update([0xff]);
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Numeric convenience wrapper for per-step / per-index streams.
pub fn derive_rng_indexed(seed: u64, tag: &str, indices: &[u64]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0xfe]);
    hasher.update(tag.as_bytes());
    for ix in indices {
        hasher.update([0xfd]);
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = derive_rng(7, &["noise"]);
        let mut b = derive_rng(7, &["noise"]);
        let mut c = derive_rng(7, &["init"]);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut a2 = derive_rng(7, &["noise"]);
        assert_ne!(a2.next_u64(), c.next_u64());
    }

    #[test]
    fn indexed_streams_differ_by_index() {
        let mut s0 = derive_rng_indexed(1, "step", &[0]);
        let mut s1 = derive_rng_indexed(1, "step", &[1]);
        assert_ne!(s0.next_u64(), s1.next_u64());
    }
}
