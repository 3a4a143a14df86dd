//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a [`StreamSeed`]: a master seed
//! plus a hashed path of tags such as `(run, outer iteration, copy, row)`.
//! The seed keys a ChaCha12 generator and the path selects its 64-bit stream,
//! so two different paths never share state and results do not depend on
//! the order in which work items are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Tags separating the independent consumers of a master seed.
pub mod tags {
    pub const INIT: u64 = 0x494e_4954;
    pub const IMPUTE: u64 = 0x494d_5055;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const SIMULATE: u64 = 0x5349_4d55;
    pub const SELECTION: u64 = 0x5345_4c45;
    pub const STUDY: u64 = 0x5354_5544;
    pub const MODEL_SELECT: u64 = 0x4d53_454c;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed {
    key: u64,
    path: u64,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StreamSeed {
    pub fn new(seed: u64) -> Self {
        StreamSeed { key: seed, path: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.key
    }

    /// Derive a sub-stream. `s.child(a).child(b)` differs from `s.child(b).child(a)`.
    pub fn child(&self, tag: u64) -> Self {
        StreamSeed {
            key: self.key,
            path: splitmix64(splitmix64(self.path) ^ tag),
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.key);
        rng.set_stream(self.path);
        rng
    }

    /// A 64-bit value derived from this stream, usable as a seed for
    /// components that accept a plain integer seed.
    pub fn derive_u64(&self) -> u64 {
        splitmix64(self.key ^ splitmix64(self.path.wrapping_add(0x5eed)))
    }
}
