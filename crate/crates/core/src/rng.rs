//! Reproducible per-replication random streams.
//!
//! Replication `r` of an ensemble draws from a ChaCha8 generator seeded with
//! `mix_seed(master, r)`, where `mix_seed` is the SplitMix64 finalizer applied
//! to `master + (r + 1)·0x9E3779B97F4A7C15`. A stream depends only on
//! `(master, r)`, so results do not depend on how replications are scheduled.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub type Stream = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function (Steele, Lea & Flood constants).
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn mix_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub fn stream(master: u64, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(mix_seed(master, index))
}

/// Uniform in `[0, 1)` from the top 53 bits of one 64-bit draw.
#[inline]
pub fn uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
