//! Seeded random streams.
//!
//! Every consumer draws from a ChaCha8 generator keyed by `(seed, stream)`, so
//! streams are independent and runs are bit-reproducible per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream ids used inside the crate.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const BATCHES: u64 = 3;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for a sub-task (e.g. one dataset sample) under a parent stream.
pub fn substream(seed: u64, stream: u64, index: u64) -> Rng {
    let mut rng = seeded(seed, stream);
    rng.set_word_pos((index as u128) << 40);
    rng
}

pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}
