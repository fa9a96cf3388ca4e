//! Reproducible random streams derived from one master seed.
//!
//! Every noise draw is addressed by a path of integers (image id, phase,
//! sample index, ...) and gets its own generator, so results do not depend on
//! how samples are split across worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in a tree of seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(master_seed: u64) -> Self {
        SeedStream(splitmix64(master_seed))
    }

    /// Child stream for `index`.
    pub fn child(self, index: u64) -> Self {
        SeedStream(splitmix64(self.0 ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }

    /// Generator for the `index`-th child.
    pub fn rng_at(self, index: u64) -> StreamRng {
        self.child(index).rng()
    }
}

/// Labels for the phases of a run, used as child indices.
pub mod phase {
    pub const TRAIN_SHUFFLE: u64 = 1;
    pub const TRAIN_NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const CERTIFY_SELECT: u64 = 10;
    pub const CERTIFY_ESTIMATE: u64 = 11;
    pub const PREDICT: u64 = 12;
    pub const ATTACK_GRADIENT: u64 = 20;
    pub const ATTACK_EVAL: u64 = 21;
}
