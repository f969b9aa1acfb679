//! Counter-based, splittable random streams.
//!
//! Every chain, worker and tree node draws from a stream keyed by stable
//! identifiers (chain id, step index, ...). The same key always yields the
//! same stream regardless of evaluation order, which is what makes
//! speculative execution reproduce the serial chain bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type handed to samplers.
pub type StreamRng = ChaCha8Rng;

/// A root seed from which keyed streams are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Streams {
    seed: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fold(key: &[u64]) -> u64 {
    let mut h = splitmix(key.len() as u64);
    for &k in key {
        h = splitmix(h ^ splitmix(k));
    }
    h
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The stream identified by `key`.
    pub fn stream(&self, key: &[u64]) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed));
        rng.set_stream(fold(key));
        rng
    }

    /// A child family of streams, independent of the parent's streams.
    pub fn child(&self, tag: u64) -> Streams {
        Streams {
            seed: splitmix(self.seed ^ splitmix(tag.wrapping_add(0x5bd1_e995))),
        }
    }
}

/// Stable tags for the stream families used by the algorithms.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const PERMUTATION: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const BRIGHTNESS: u64 = 4;
    pub const ROUTING: u64 = 5;
    pub const AGGREGATE: u64 = 6;
    pub const INIT: u64 = 7;
}
