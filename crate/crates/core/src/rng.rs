//! Seeded random streams.
//!
//! Every stochastic component takes one of these explicitly; nothing in the
//! crate reads entropy from the environment.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// SplitMix64 finaliser; used to derive independent child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for child stream `stream` of `parent`. Distinct streams of the same
/// parent are statistically independent.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    mix64(mix64(parent) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Child RNG for `stream` of `parent`.
pub fn child(parent: u64, stream: u64) -> SeededRng {
    seeded(derive_seed(parent, stream))
}
