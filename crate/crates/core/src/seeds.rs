//! Counter-derived random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(master seed, purpose tag, counter, index)`. Streams never depend on
//! worker arrival order, so parallel data generation stays deterministic,
//! and resuming at step `k` reproduces the exact draws of an uninterrupted
//! run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Derive a 64-bit stream seed.
pub fn derive(master: u64, tag: &str, counter: u64, index: u64) -> u64 {
    let mut s = splitmix64(master ^ tag_hash(tag));
    s = splitmix64(s ^ counter);
    splitmix64(s ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Deterministic rng for `(master, tag, counter, index)`.
pub fn stream(master: u64, tag: &str, counter: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, counter, index))
}
