//! Seed management.
//!
//! A run is driven by a single 64-bit root seed. Every consumer derives its
//! own generator from the root and a fixed label, so adding a new consumer
//! never shifts the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Generator for the stream named `label` under `root`.
pub fn stream(root: u64, label: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let seed: [u8; 32] = hasher.finalize().into();
    Rng::from_seed(seed)
}
