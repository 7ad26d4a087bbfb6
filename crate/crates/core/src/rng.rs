//! Deterministic random substreams.
//!
//! Every random draw in a run is taken from a ChaCha8 stream keyed by the
//! run seed, a purpose tag, and a short list of coordinates such as
//! `(step, slot)` or `(sample_index, draw)`. Two streams with different keys
//! are independent, and a stream never depends on which other streams were
//! consumed before it. This is what makes resumed training and ensemble
//! sweeps reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags that separate the stream families of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batch = 2,
    Augment = 3,
    Mask = 4,
    Ensemble = 5,
    Synth = 6,
    Signature = 7,
    Test = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the generator for `(seed, stream, coords...)`.
pub fn substream(seed: u64, stream: Stream, coords: &[u64]) -> Rng {
    fn mix(state: &mut u64, v: u64) {
        let mut folded = *state ^ v.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        *state = splitmix64(&mut folded);
    }
    let mut state = seed ^ 0x5EED_0FE4_B7AC_E5A1;
    mix(&mut state, stream as u64);
    mix(&mut state, coords.len() as u64);
    for &c in coords {
        mix(&mut state, c);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
