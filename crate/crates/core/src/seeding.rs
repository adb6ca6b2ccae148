//! Deterministic random streams keyed by tuples of integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key tuple into one seed. Different tuples (including different
/// lengths) give unrelated seeds.
pub fn stream_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(parts.len() as u64), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(parts))
}

/// Purpose tags mixed into stream keys.
pub mod purpose {
    pub const TRAIN_NEGATIVES: u64 = 1;
    pub const VALID_NEGATIVES: u64 = 2;
    pub const TEST_NEGATIVES: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const TIES: u64 = 7;
    pub const TARGET_SLOT: u64 = 8;
}
