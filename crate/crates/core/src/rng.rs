//! Seeded random streams.
//!
//! Every generated column draws from its own ChaCha stream so that adding a
//! column never perturbs the others and results do not depend on the order in
//! which columns are produced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. The low 32 bits of a stream id carry a column/modality index.
pub mod tag {
    pub const EPS: u64 = 1;
    pub const NU: u64 = 2;
    pub const FEATURE: u64 = 3;
    pub const WEIGHT: u64 = 4;
    pub const UNEXPLAINED: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const SUBSAMPLE: u64 = 9;
    pub const DIRECTION: u64 = 10;
    pub const VALIDATION: u64 = 11;
    pub const FOLD: u64 = 12;
    pub const REPEAT: u64 = 13;
    pub const LEARNER: u64 = 14;
}

pub fn stream(seed: u64, tag: u64, modality: u32, column: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, tag));
    rng.set_stream(((modality as u64) << 32) | column as u64);
    rng
}

/// SplitMix64 finalizer applied to `seed ^ salt`; derives child seeds.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
