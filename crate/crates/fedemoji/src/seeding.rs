//! Deterministic derivation of independent random streams.
//!
//! Every random decision in the simulator draws from a stream derived from
//! the run seed, a static tag naming the operation, and integer coordinates
//! (round, client id, epoch, ...). Streams are stable across platforms and
//! independent of scheduling, which keeps parallel runs bit-reproducible and
//! lets a resumed run replay the exact randomness of the original.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; full-period mixing of a 64-bit state.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes; stable, unlike `DefaultHasher`.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from `(seed, tag, parts)`.
pub fn derive(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ fnv1a(tag));
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// A ChaCha stream keyed by `(seed, tag, parts)`.
pub fn stream(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, parts))
}
