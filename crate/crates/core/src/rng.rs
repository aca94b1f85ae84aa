//! Seed-derived random streams.
//!
//! Every stochastic stage draws from its own ChaCha8 stream derived from a
//! user-visible seed, a stage tag and an index (usually the epoch). Restarting
//! a run at epoch `e` therefore reproduces epochs `e..` exactly, because no
//! stream state has to survive across epochs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_DATA: u64 = 1;
pub const TAG_NOISE: u64 = 2;
pub const TAG_INIT: u64 = 3;
pub const TAG_PRETRAIN: u64 = 4;
pub const TAG_WARMUP: u64 = 5;
pub const TAG_MLE: u64 = 6;
pub const TAG_CLUSTER: u64 = 7;

/// Derives an independent ChaCha8 stream from `(seed, tag, index)`.
pub fn seed_stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
