//! Seeded random streams.
//!
//! Every consumer of randomness (data synthesis, splitting, training, attacks)
//! draws from its own ChaCha20 stream derived from one top-level seed and a
//! stream name. The ChaCha stream id is the 64-bit FNV-1a hash of the name, so
//! streams with different names never share keystream and the mapping is
//! identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Rng = ChaCha20Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Generator for item `index` of a named family, e.g. the attack on test
/// sample 17. Used where work is spread over threads.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = substream(seed, name);
    // 2^64 words per item is far more than any consumer draws.
    rng.set_word_pos(u128::from(index) << 64);
    rng
}
