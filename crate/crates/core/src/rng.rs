//! Seeded random streams.
//!
//! All randomness in the crate flows from a single `u64` seed through named
//! substreams (`init`, `sampling`, `shuffle`, `speckle`, ...), so each
//! component can be reproduced in isolation: two substreams with different
//! labels never overlap, and the same (seed, label) pair always yields the
//! same sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to turn a substream label into a stable stream id.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A deterministic RNG for the given seed and substream label.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(label.as_bytes()));
    rng
}
