//! Seeded stream derivation.
//!
//! Every stochastic component owns a ChaCha8 stream derived from the run
//! seed plus a purpose tag, so concurrent workers never share state and
//! any sequence can be replayed from `(seed, tags)` alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain-separation tags for derived streams.
pub mod tag {
    pub const DATA_ORDER: u64 = 0x01;
    pub const PARAM_INIT: u64 = 0x02;
    pub const ATTACK: u64 = 0x03;
    pub const ENSEMBLE_DRAW: u64 = 0x04;
    pub const DATASET_SYNTH: u64 = 0x05;
    pub const BLOCK_SHUFFLE: u64 = 0x06;
    pub const GRAPH_GEN: u64 = 0x07;
}

/// Derives an independent stream from a base seed and a tag path.
///
/// Uses the SplitMix64 finalizer to mix each tag into the state; distinct
/// tag paths give unrelated ChaCha keys.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = splitmix64(state.wrapping_add(t));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let mut a = substream(42, &[tag::ATTACK, 0]);
        let mut b = substream(42, &[tag::ATTACK, 0]);
        let mut c = substream(42, &[tag::ATTACK, 1]);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_eq!(x, y);
        assert_ne!(x, z);
    }
}
