//! Deterministic RNG streams.
//!
//! All randomness in the crate flows from one master seed. Each use site
//! gets an independent ChaCha stream keyed by (purpose, index), so
//! per-sample work can run in any order without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Purpose {
    Init = 0,
    Shuffle = 1,
    Augment = 2,
    Synth = 3,
    Test = 7,
}

pub fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Stream index for per-sample augmentation: epoch in the high half,
/// dataset index in the low half.
pub fn augment_index(epoch: usize, sample: usize) -> u64 {
    ((epoch as u64) << 28) | (sample as u64 & ((1 << 28) - 1))
}
