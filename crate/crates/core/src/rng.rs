//! Seeded random streams.
//!
//! Every random draw in a run comes from ChaCha8 keyed by the run seed, with a
//! distinct 64-bit stream id per consumer. Two consumers never share a stream,
//! so adding draws to one (say, a larger batch) never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the consumers of the run seed.
pub mod streams {
    pub const IMAGE_HEAD_INIT: u64 = 1;
    pub const TEXT_HEAD_INIT: u64 = 2;
    pub const PRIOR: u64 = 3;
    pub const SYNTH: u64 = 4;
    /// Epoch `e` shuffles with stream `SHUFFLE_BASE + e`.
    pub const SHUFFLE_BASE: u64 = 1 << 32;
    /// Worker `w` draws from stream `WORKER_BASE + w`.
    pub const WORKER_BASE: u64 = 1 << 48;
}

/// ChaCha8 generator for `(seed, stream)`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-worker substream derived from `(seed, worker)`.
pub fn worker_stream(seed: u64, worker: u64) -> ChaCha8Rng {
    substream(seed, streams::WORKER_BASE + worker)
}
