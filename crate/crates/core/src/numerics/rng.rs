//! Splittable, platform-independent random streams.
//!
//! A stream is a value-type descriptor `(seed, stream_id)`; materializing it
//! yields a ChaCha12 generator keyed from both words. Children are derived by
//! hashing the child index into the stream id, so `split(k)` is a pure
//! function and parallel consumers can be handed disjoint streams without any
//! shared state. Reproducibility is therefore independent of thread count and
//! of how much randomness sibling streams consume.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Descriptor for a deterministic random stream.
///
/// Identical `(seed, stream_id)` pairs produce identical sample sequences on
/// every platform. Streams are split, never shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
}

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

impl RngStream {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    /// Derive the `child`-th sub-stream. Distinct children of distinct
    /// parents collide only with negligible (birthday, 2^-64) probability.
    pub fn split(&self, child: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: mix64(
                self.stream_id
                    .wrapping_mul(GOLDEN)
                    .wrapping_add(child)
                    .wrapping_add(1),
            ),
        }
    }

    /// Materialize the stream as a concrete generator. Repeated calls return
    /// generators that produce the same sequence.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        let mut a = self.seed;
        let mut b = self.stream_id ^ GOLDEN;
        for chunk in key.chunks_exact_mut(8) {
            a = a.wrapping_add(GOLDEN);
            b = b.wrapping_add(GOLDEN);
            let word = mix64(a) ^ mix64(b).rotate_left(32);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha12Rng::from_seed(key)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}
