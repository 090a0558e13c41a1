//! Seed derivation. Every random draw in the crate comes from a stream
//! seeded by hashing the experiment seed together with stable identifiers
//! (scene id, box coordinates, purpose tag). Streams are therefore pure
//! functions of their inputs, which keeps results independent of
//! evaluation order and of the degree of parallelism.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap stream splitting.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds the parts into one well-mixed seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix(acc ^ p);
    }
    acc
}

/// Stream tag built from up to 8 ASCII bytes, so call sites read as text.
pub const fn tag(name: &str) -> u64 {
    let bytes = name.as_bytes();
    assert!(bytes.len() <= 8);
    let mut v = 0u64;
    let mut i = 0;
    while i < bytes.len() {
        v = (v << 8) | bytes[i] as u64;
        i += 1;
    }
    v
}

/// ChaCha stream for the given parts. ChaCha8 keeps draws identical across
/// platforms and library versions, unlike `StdRng`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Stable bit pattern of a coordinate for seed mixing.
pub fn bits(x: f64) -> u64 {
    x.to_bits()
}
