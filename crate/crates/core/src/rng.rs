//! Named random substreams derived from a single root seed.
//!
//! Each pipeline stage draws from `substream(root, "stage-name")`, so editing
//! one stage's configuration never perturbs the random numbers another stage
//! sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Derive a 64-bit seed for `name` from `root`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn substream(root: u64, name: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

pub fn seeded(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}
