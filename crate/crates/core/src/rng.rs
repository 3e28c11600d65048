//! Seed-stream derivation.
//!
//! All randomness in a run flows from one config seed. Independent
//! purposes ("train", "data", "init", ...) get independent ChaCha streams
//! derived by hashing the seed together with the stream name, so adding a
//! consumer never perturbs the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub fn seed_stream(seed: u64, name: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
