//! Deterministic RNG stream derivation.
//!
//! All randomness in the crate flows from a single `u64` seed. Independent
//! streams (per purpose, per step, per anchor) are derived by mixing the
//! master seed with a list of tag words, so results do not depend on
//! scheduling or call order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive an independent ChaCha stream from a master seed and tag words.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(master);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t.wrapping_add(0xA5A5_A5A5_A5A5_A5A5)));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Stable tag for a named stream ("bag", "epoch", ...).
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
