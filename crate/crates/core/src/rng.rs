//! Seeded random streams.
//!
//! A Monte-Carlo family is keyed by its base seed and every run draws from
//! its own ChaCha8 stream within that key, so runs can execute in any order
//! or in parallel and still reproduce exactly. Different base seeds give
//! unrelated families.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn stream_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `index` of the family keyed by `base`.
pub fn indexed_rng(base: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng
}
