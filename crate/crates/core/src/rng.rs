//! Seed derivation. Every random stream is keyed by
//! `(global seed, purpose tag, index)` so runs are reproducible and streams
//! never overlap by accident.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream_seed(global: u64, purpose: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn stream(global: u64, purpose: &str, index: u64) -> Rng {
    ChaCha8Rng::from_seed(stream_seed(global, purpose, index))
}
