//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`), and standard normals are drawn
//! with the ziggurat sampler of `rand_distr::StandardNormal`. Both algorithms
//! are integer based and fixed by the pinned crate versions, so a seed yields
//! the same numbers on every platform.
//!
//! Independent streams for Monte-Carlo batches are obtained with
//! [`derive_seed`], a SplitMix64 mix of a base seed and a stream index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Generator type used for all sampling in the crate.
pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream of `base`.
///
/// Distinct `(base, index)` pairs give distinct, decorrelated seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

#[inline]
pub fn standard_normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out {
        *v = standard_normal(rng);
    }
}
