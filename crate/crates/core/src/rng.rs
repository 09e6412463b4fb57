//! Deterministic randomness.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based
//! generator: the 64-bit seed selects the key and a named stream selects
//! the ChaCha stream id, so independent consumers (weight init, data
//! sampling, k-means seeding, ...) never share state and adding draws in
//! one does not perturb another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

/// Generator for the named stream under `seed`.
pub fn stream(seed: u64, name: &str) -> Prng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
