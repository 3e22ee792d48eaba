//! Deterministic seed derivation.
//!
//! Every stochastic component of the harness (weight init, shard shuffles,
//! dropout masks, augmentation) draws from a ChaCha stream whose seed is
//! derived from the experiment seed plus a fixed tuple of context values.
//! Identical (seed, context) always yields the identical stream, regardless
//! of execution order, which is what makes concurrent and sequential client
//! execution produce the same results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a tuple of values into a single 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x51a0_9e66_7f3b_cc90u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// A ChaCha stream seeded from the mixed tuple.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
