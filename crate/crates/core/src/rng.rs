//! Seed derivation. Every random draw in the crate goes through a
//! [`ChaCha8Rng`] built here so that streams are reproducible across
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independent streams apart for the same user seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    InitialCondition = 1,
    Mask = 2,
    EsnWeights = 3,
    ReadoutInit = 4,
    LaserInit = 5,
    Lyapunov = 6,
}

pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    // splitmix64 over (seed, stream, index)
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
