//! Deterministic derivation of independent random streams.
//!
//! Every stochastic component (per-student generation, per-client batch
//! shuffles, dropout masks) draws from a ChaCha stream keyed by a tuple of
//! integers, so results never depend on execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a tuple of keys into one 64-bit seed.
pub fn mix(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5851_f42d_4c95_7f2d, |acc, &k| {
        splitmix64(acc ^ splitmix64(k))
    })
}

pub fn stream(keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(mix(keys))
}

/// Stable 64-bit hash of a string (FNV-1a), used to key streams by name.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
