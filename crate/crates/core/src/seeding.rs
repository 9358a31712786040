//! Keyed RNG streams.
//!
//! Every random draw in a run comes from a stream keyed by the run seed and
//! a tuple of tags (purpose, client, round, ...), so results do not depend
//! on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MODEL_INIT: u64 = 1;
pub const FREE_RIDERS: u64 = 2;
pub const LOCAL_TRAIN: u64 = 3;
pub const ATTACK: u64 = 4;
pub const PARTICIPATION: u64 = 5;
pub const SERVER_NOISE: u64 = 6;
pub const DETECTOR: u64 = 7;
pub const PARTITION: u64 = 8;
pub const DATASET: u64 = 9;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_keyed() {
        let a: u64 = stream(7, &[LOCAL_TRAIN, 3, 5]).gen();
        let b: u64 = stream(7, &[LOCAL_TRAIN, 3, 5]).gen();
        let c: u64 = stream(7, &[LOCAL_TRAIN, 5, 3]).gen();
        let d: u64 = stream(8, &[LOCAL_TRAIN, 3, 5]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
