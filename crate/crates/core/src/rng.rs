//! Deterministic named RNG streams.
//!
//! One top-level seed is split into independent streams by name (`"channel"`,
//! `"optimizer"`, `"estimator"`, `"fl"`, `"rates"`, ...). Sub-streams nest via
//! slash-separated names such as `"fl/user3/round17"`, which keeps per-user
//! per-round draws independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the stream name; stable across platforms and releases.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive the ChaCha12 stream for `(seed, name)`.
pub fn named_stream(seed: u64, name: &str) -> ChaCha12Rng {
    let tag = fnv1a64(name.as_bytes());
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    // Differentiate the third word so (seed, name) collisions would need a
    // full 128-bit coincidence, not just one hash collision.
    key[16..24].copy_from_slice(&tag.rotate_left(31).wrapping_mul(0x9e37_79b9_7f4a_7c15).to_le_bytes());
    key[24..32].copy_from_slice(&seed.rotate_left(17).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
