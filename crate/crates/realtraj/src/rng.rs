//! Seed derivation and RNG construction.
//!
//! One root seed drives every run. Module- and item-level seeds are derived
//! by a fixed, platform-independent hash so that the same root seed always
//! yields the same streams, independent of std hasher internals.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(root, label)`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label.as_bytes()))
}

/// Derives a child seed from `(root, label, index)` for per-item streams.
pub fn derive_seed_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(root, label) ^ splitmix64(index.wrapping_add(1)))
}

/// The project-wide RNG. ChaCha gives identical streams on every platform.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
