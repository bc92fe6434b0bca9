//! Deterministic sub-seed derivation.
//!
//! Every randomized step in the workspace draws from a [`rand_chacha::ChaCha8Rng`]
//! seeded through [`derive_seed`], so one global seed pins the entire run and
//! sub-seeds are stable across platforms and std versions (no `DefaultHasher`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the purpose string, mixed with the global seed through
/// splitmix64. Stable by construction; collisions between distinct purpose
/// strings are astronomically unlikely.
pub fn derive_seed(global: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in purpose.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global ^ h)
}

/// RNG for a named purpose under a global seed.
pub fn rng_for(global: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, purpose))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
