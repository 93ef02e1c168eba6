//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 (`rand_chacha`), a counter-based
//! stream cipher generator. A `(seed, stream)` pair fully identifies a
//! sequence, so independent consumers (initialization, data batches,
//! permutations) never share state and stay reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::C64;

pub type KruRng = ChaCha8Rng;

/// Stream ids reserved for the different consumers of a run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const VALID_DATA: u64 = 3;
    pub const TEST_DATA: u64 = 4;
    pub const PERMUTATION: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

pub fn rng_from_seed(seed: u64) -> KruRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: u64) -> KruRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic 64-bit seed for item `index` of `stream` (splitmix64 mix).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Standard complex Gaussian: real and imaginary parts independent N(0, 1/2).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    C64::new(gaussian(rng) * s, gaussian(rng) * s)
}
