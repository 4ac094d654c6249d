//! Seeded random-number substreams.
//!
//! All randomness in the pipeline flows from one 64-bit seed. Components
//! draw from named substreams (`"augment"`, `"ransac"`, `"synth"`, ...),
//! so re-running a single stage reproduces its draws without replaying the
//! others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for `(seed, stream name, index)`.
///
/// The name/index pair selects a ChaCha stream; distinct pairs yield
/// independent streams under the same master seed.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(fnv1a(name), index));
    rng
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
