//! Seed derivation. Every random stream in a run is a ChaCha generator keyed
//! by `(run seed, stream id, counter)`, so a draw never depends on how many
//! numbers some other part of the program consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream identifiers.
pub mod stream {
    pub const CRITIC_INIT: u64 = 1;
    pub const GENERATOR_INIT: u64 = 2;
    pub const BATCH_SAMPLING: u64 = 3;
    pub const LATENT: u64 = 4;
    pub const INTERPOLATION: u64 = 5;
    pub const GRADIENT_NOISE: u64 = 6;
    pub const EVAL_LATENT: u64 = 7;
    pub const CLASSIFIER: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter)
}

pub fn stream_rng(seed: u64, stream: u64, counter: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, stream, counter))
}

pub fn standard_normals<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
