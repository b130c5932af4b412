//! Seeded random streams.
//!
//! Every stochastic choice draws from a stream identified by
//! `(seed, purpose tag, index)`. The triple is folded through SplitMix64 into a
//! single 64-bit seed, which in turn seeds a xoshiro256++ generator (whose
//! state is itself expanded by SplitMix64). Distinct tags or indices give
//! independent streams, so work can be split across clips or steps without
//! changing any bytes.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Folds `(seed, tag, index)` into one derived seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut state = seed;
    let a = splitmix64(&mut state);
    let mut state = a ^ fnv1a(tag);
    let b = splitmix64(&mut state);
    let mut state = b ^ index.wrapping_mul(GOLDEN);
    splitmix64(&mut state)
}

pub fn stream(seed: u64, tag: &str, index: u64) -> StreamRng {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, tag, index))
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut StreamRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng) * std).collect()
}
