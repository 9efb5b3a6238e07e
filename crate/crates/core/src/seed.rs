//! Splittable seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Root of a tree of reproducible random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub base_seed: u64,
}

impl SeedSpec {
    pub const fn new(base_seed: u64) -> Self {
        Self { base_seed }
    }

    /// Child spec for a labelled sub-stream, so derivations can nest.
    pub fn child(&self, label: &str, index: u64) -> SeedSpec {
        SeedSpec::new(derive_seed(*self, label, index))
    }

    pub fn rng(&self, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(*self, label, index))
    }
}

/// Hashes (base seed, label, index) into a 64-bit child seed. The label is
/// length-prefixed so distinct (label, index) pairs never share an input.
pub fn derive_seed(spec: SeedSpec, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(spec.base_seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
