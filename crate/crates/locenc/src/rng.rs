//! Purpose-keyed RNG derivation.
//!
//! Every source of randomness in the crate is derived from one root seed
//! plus a short purpose string, so subsystems stay reproducible regardless
//! of the order in which they run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the purpose string; stable across platforms and versions.
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

/// Derive a deterministic sub-seed from a root seed and a purpose label.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    splitmix64(root ^ fnv1a(purpose.as_bytes()))
}

/// Seeded generator for one purpose.
pub fn seeded_rng(root: u64, purpose: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, purpose))
}
