//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 keyed by a 64-bit seed; independent
//! consumers of the same seed use distinct stream ids so adding draws to one
//! consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Recorded in dataset metadata so files can be traced to the generator.
pub const GENERATOR_VERSION: &str = "chacha8-stream-v1";

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids reserved outside dataset generation (which uses 0..4).
pub mod streams {
    pub const INIT: u64 = 16;
    pub const OPTIMIZER: u64 = 17;
    pub const POSTERIOR: u64 = 18;
    pub const POWER_ITERATION: u64 = 19;
    pub const BOOTSTRAP: u64 = 20;
}
