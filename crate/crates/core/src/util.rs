//! Small deterministic helpers shared across modules.
//!
//! Everything seeded here must be stable across runs, platforms, and
//! dependency patch bumps, so hashing and float sampling are written out
//! explicitly instead of relying on `DefaultHasher` or distribution impls.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash of a byte string. Stable by construction.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 step, used to decorrelate composite seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for a (seed, label) pair. Label-keyed so parameter initialization does
/// not depend on declaration order.
pub fn keyed_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a64(label.as_bytes())))
}

/// Uniform f64 in [0, 1) from the top 53 bits of the generator, bit-stable.
pub fn uniform01(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [-bound, bound).
pub fn uniform_sym(rng: &mut impl RngCore, bound: f64) -> f64 {
    (uniform01(rng) * 2.0 - 1.0) * bound
}
