//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! base seed plus a tuple of tags (step, frame, sample index, ...), so results
//! never depend on evaluation order or thread count.

use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a list of tags into a single 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// A ChaCha8 stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

pub fn normal_f32(rng: &mut Rng) -> f32 {
    StandardNormal.sample(rng)
}

pub fn normal_f64(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` standard normal draws.
pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| normal_f32(rng)).collect()
}

/// FNV-1a over bytes; used for prompt hashing and weight checksums.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
