//! Deterministic seed derivation.
//!
//! Every random stream in the toolkit is a `ChaCha8Rng` keyed by a 64-bit seed
//! derived from a master seed and a path of integer tags (trial index, issue
//! index, retry attempt, ...). Streams with different tag paths are
//! independent for all practical purposes, and the derivation does not depend
//! on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `master`, one splitmix round per tag.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(master: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}

/// Tag namespaces, so that e.g. graph and dynamics streams of the same trial
/// never collide.
pub mod stream {
    pub const GRAPH: u64 = 1;
    pub const TRUST: u64 = 2;
    pub const INITIAL: u64 = 3;
    pub const DYNAMICS: u64 = 4;
    pub const SCHEDULE: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const PLACEMENT: u64 = 7;
}
