//! Named random streams derived from a single run seed.
//!
//! Every consumer of randomness (weight init per block, per-epoch shuffling, per-epoch
//! augmentation, dataset splits) gets its own stream keyed by a tag and an index, so two
//! runs with the same seed draw identical numbers for the same purpose regardless of what
//! else they do. This is what lets an entire-model run and a progressive run share data
//! order and augmentation exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(tag)) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
