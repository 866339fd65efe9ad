//! Seed derivation. Every random stream in the crate comes from a ChaCha8
//! generator keyed by a 64-bit seed mixed from a base seed and stream labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for a labelled sub-stream.
pub fn derive(base: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix64(base), |acc, &l| mix64(acc ^ mix64(l)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream labels.
pub(crate) const STREAM_PATHS: u64 = 0x5041_5448;
pub(crate) const STREAM_NOISE: u64 = 0x4e4f_4953;
pub(crate) const STREAM_SNR: u64 = 0x534e_5252;
pub(crate) const STREAM_INIT: u64 = 0x494e_4954;
pub(crate) const STREAM_SHUFFLE: u64 = 0x5348_5546;
