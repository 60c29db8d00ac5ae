//! Seeded random streams.
//!
//! Every run owns one seed. Independent consumers (initialization, segment
//! sampling, Gaussian noise, chains, ...) each take their own ChaCha stream
//! of that seed, so adding draws in one place never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub type RunRng = ChaCha20Rng;

/// Well-known stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SEGMENTS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const MINIBATCH: u64 = 5;
    pub const DATA: u64 = 6;
    pub const CHAIN: u64 = 7;
    /// Base for per-worker streams (`WORKER + i`).
    pub const WORKER: u64 = 1 << 20;
}

pub fn stream(seed: u64, stream: u64) -> RunRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed, for handing a whole sub-run its own seed space.
pub fn child_seed(seed: u64, stream_id: u64) -> u64 {
    stream(seed, streams::WORKER + stream_id).random()
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
