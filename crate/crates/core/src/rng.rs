//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit stream. Work that may fan out
//! across workers derives an independent substream from the run seed and a
//! path of indices (step, prompt, sample, ...), so results do not depend on
//! scheduling order.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Stream;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for the root seed.
pub fn stream(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}

/// Independent substream identified by `path` below `seed`.
pub fn substream(seed: u64, path: &[u64]) -> Stream {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    Stream::seed_from_u64(h)
}

/// Labels for substream paths.
pub mod label {
    pub const PROMPT: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const MASK: u64 = 3;
    pub const INIT: u64 = 4;
    pub const NOISE: u64 = 5;
}
