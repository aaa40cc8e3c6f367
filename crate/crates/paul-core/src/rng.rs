//! Deterministic, platform-independent RNG streams.
//!
//! Every random decision in the crate draws from a ChaCha stream keyed by
//! `(seed, domain, index)`. Streams are independent, so generation order
//! (or parallelism) cannot change what any one consumer sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for independent stream families.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    WorldNoise,
    Landmarks,
    Pair,
    TestQuery,
    ModelInit,
    Shuffle,
    FillNoise,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::WorldNoise => 0x01,
            Domain::Landmarks => 0x02,
            Domain::Pair => 0x03,
            Domain::TestQuery => 0x04,
            Domain::ModelInit => 0x05,
            Domain::Shuffle => 0x06,
            Domain::FillNoise => 0x07,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut state = seed;
    state = splitmix64(&mut state) ^ domain.tag().wrapping_mul(0xd134_2543_de82_ef95);
    state = splitmix64(&mut state) ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
