//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! `(master seed, stream id, counter)`. Distinct keys give independent
//! streams, so results never depend on execution order or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_NPIP: u64 = 0;
pub(crate) const STREAM_SIM_DATA: u64 = 0x5349_4d00_0000_0000;
pub(crate) const STREAM_SIM_SEED: u64 = 0x5345_4544_0000_0000;
pub(crate) const STREAM_ITERATED: u64 = 0x4954_4552_0000_0000;

pub(crate) fn keyed_rng(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stream id for pairwise-independent relabelings of the unordered pair.
pub(crate) fn pair_stream(j: usize, h: usize) -> u64 {
    let (a, b) = if j < h { (j, h) } else { (h, j) };
    1 + ((a as u64) << 32 | b as u64)
}

/// Derives a child seed (e.g. one per simulation replication).
pub(crate) fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    use rand::RngCore;
    keyed_rng(seed, stream, counter).next_u64()
}
