//! Named, seeded random streams.
//!
//! One user seed fans out into independent streams (world, episode, init,
//! dropout, sampling, ...) so changing one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, name: &str) -> u64 {
    mix(seed ^ fnv1a(name.as_bytes()).rotate_left(17))
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(stream_seed(seed, name))
}

/// Stream keyed by a name and an index (episode number, view id, ...).
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix(stream_seed(seed, name) ^ mix(index)))
}
