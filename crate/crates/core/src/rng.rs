//! Counter-based random substreams.
//!
//! Every consumer of randomness derives its own generator from
//! `(seed, round, stream)`, so the values a client or the server sees never
//! depend on scheduling order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Stream identifiers above every valid client index.
pub const SERVER_STREAM: u64 = u64::MAX;
pub const SELECTION_STREAM: u64 = u64::MAX - 1;
pub const PARTITION_STREAM: u64 = u64::MAX - 2;
pub const ATTACK_STREAM: u64 = u64::MAX - 3;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the `(seed, round, stream)` coordinate.
pub fn substream(seed: u64, round: u64, stream: u64) -> StreamRng {
    let mut state = seed;
    let mut key = [0u8; 32];
    let mut mix = splitmix64(&mut state) ^ round.rotate_left(17);
    mix = splitmix64(&mut mix) ^ stream.rotate_left(41);
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut mix).to_le_bytes());
    }
    StreamRng::from_seed(key)
}
