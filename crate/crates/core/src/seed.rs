//! Deterministic RNG stream derivation.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from
//! the master seed, a purpose tag and an index. Streams are stable across
//! runs and independent of scheduling, which is what makes whole training
//! runs reproducible byte for byte.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash of a tag string.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a master seed, a purpose tag and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    master ^ fnv1a(tag) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Builds the RNG for a derived stream.
pub fn stream_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let x = derive_seed(master, tag, index);
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
        let v = x.wrapping_add(fnv1a(tag).rotate_left(i as u32 * 17 + 1));
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// RNG seeded directly from a `u64`, for standalone components.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
