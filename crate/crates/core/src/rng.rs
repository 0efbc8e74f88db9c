//! Deterministic RNG streams.
//!
//! Every source of randomness in the crate is a ChaCha8 stream derived from
//! a master seed plus a list of domain tags (client id, round, purpose).
//! Streams are independent of each other and of execution order, which is
//! what makes parallel client training bitwise reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams. Keeping them in one place avoids
/// accidental collisions between modules.
pub mod tag {
    pub const SYNTH_MEANS: u64 = 0x01;
    pub const SYNTH_SAMPLES: u64 = 0x02;
    pub const PARTITION: u64 = 0x03;
    pub const SPLIT: u64 = 0x04;
    pub const INIT_GLOBAL: u64 = 0x05;
    pub const INIT_PERSONAL: u64 = 0x06;
    pub const TRAIN_ORDER: u64 = 0x07;
    pub const GATE_INIT: u64 = 0x08;
    pub const MOE_ORDER: u64 = 0x09;
    pub const THEOREM: u64 = 0x0a;
    pub const NOISE_EXPERT: u64 = 0x0b;
    pub const ATTEMPT: u64 = 0x0c;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a ChaCha8 stream from a master seed and a sequence of tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0xd1342543de82ef95));
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
