//! Seeded random streams.
//!
//! Every stage draws from its own ChaCha stream derived from a root seed and a
//! fixed label, so stages can be rerun independently with identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Stream for `label` under `seed`.
pub fn substream(seed: u64, label: &str) -> StageRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    StageRng::from_seed(h.finalize().into())
}
