//! Seeded, portable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type NtaaRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn rng_for(seed: u64, stream: u64) -> NtaaRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Stream `stream` of a generator keyed by `(seed, salt)`, e.g. a per-epoch shuffle.
pub fn rng_for_salted(seed: u64, salt: u64, stream: u64) -> NtaaRng {
    rng_for(splitmix64(seed ^ splitmix64(salt)), stream)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut NtaaRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stream identifiers, kept in one place so phases never share randomness.
pub mod streams {
    pub const DATA_SOURCE: u64 = 1;
    pub const DATA_TARGET: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const ORACLE: u64 = 8;
}
