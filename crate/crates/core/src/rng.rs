//! Per-realization seed derivation.
//!
//! Every realization owns one generator seeded from
//! `(master seed, protocol tag, size, index)`, so results do not depend on
//! how realizations are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit tag of a protocol name.
pub fn tag(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn derive_seed(master: u64, protocol: &str, size: u64, index: u64) -> u64 {
    let mut h = mix(master.wrapping_add(GOLDEN));
    for word in [tag(protocol), size, index] {
        h = mix(h ^ word.wrapping_add(GOLDEN).wrapping_add(h << 6).wrapping_add(h >> 2));
    }
    h
}

/// Seed for the `attempt`-th retry of a realization.
pub fn retry_seed(seed: u64, attempt: u64) -> u64 {
    if attempt == 0 {
        seed
    } else {
        mix(seed ^ mix(attempt.wrapping_mul(GOLDEN)))
    }
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
