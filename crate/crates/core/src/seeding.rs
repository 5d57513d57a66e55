//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a value produced here, so runs are reproducible across
//! platforms and independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and an ordered list of stream ids.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(mix64(base), |acc, &s| mix64(acc ^ mix64(s.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of the batch permutation used in `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    derive_seed(seed, &[0xE90C, epoch])
}

/// Seed for replica `replica` in phase `phase` of a run seeded with `base`.
pub fn replica_seed(base: u64, phase: u64, replica: u64) -> u64 {
    derive_seed(base, &[phase, replica])
}
