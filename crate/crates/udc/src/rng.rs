//! Deterministic random streams.
//!
//! Every randomized component draws from its own labeled substream derived
//! from the master seed, so adding or reordering one component never perturbs
//! the draws of another. The substream seed is sha256(master || label), which
//! keeps streams independent without any coordination.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive the rng for `label` under `master`.
pub fn sub_rng(master: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
