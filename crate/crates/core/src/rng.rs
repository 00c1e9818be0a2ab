//! Seed fan-out. Every random consumer derives its generator from one root
//! seed plus a fixed stream id, so components never share a random sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub mod stream {
    pub const GENERATOR_INIT: u64 = 1;
    pub const DISCRIMINATOR_INIT: u64 = 2;
    pub const ENCODER_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const IMITATION_NOISE: u64 = 5;
    pub const DEFENSE_NOISE: u64 = 6;
    pub const DECODER_FIT: u64 = 7;
    pub const FEATURE_EXTRACTOR: u64 = 8;
    pub const SYNTHETIC: u64 = 9;
}

pub fn seeded(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}
