//! Seeded random streams addressed by a path of integers, so that e.g. the
//! stream for (step 3, prompt 1, response 2) does not depend on how many
//! other streams were drawn or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, label: &str, path: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0xff]);
    h.update(seed.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
