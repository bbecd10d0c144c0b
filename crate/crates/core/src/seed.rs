//! Seed derivation. Every random draw in the crate comes from a stream keyed by
//! `(master seed, round, purpose)` so runs are reproducible and sub-streams do
//! not overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `words` into `seed` one at a time.
#[inline]
pub fn derive(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(mix64(seed ^ GOLDEN), |acc, &w| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(w.wrapping_add(GOLDEN)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    FirstSketch = 1,
    SecondSketch = 2,
    SketchNoise = 3,
    StatNoise = 4,
    ThresholdNoise = 5,
    Cohort = 6,
    Masks = 7,
    LocalTraining = 8,
    TaskData = 9,
    ModelInit = 10,
}

pub fn sub_seed(master: u64, round: u64, purpose: Purpose) -> u64 {
    derive(master, &[round, purpose as u64])
}

pub fn stream(master: u64, round: u64, purpose: Purpose) -> Stream {
    Stream::seed_from_u64(sub_seed(master, round, purpose))
}

pub fn stream_from(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}
