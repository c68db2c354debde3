//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for the stream `name` under `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(mix(seed ^ mix(fnv1a(name))))
}

/// Generator for item `index` of stream `name`.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix(mix(seed ^ mix(fnv1a(name))) ^ index))
}
