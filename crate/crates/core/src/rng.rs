//! Seed derivation.
//!
//! Every random stream in a run is keyed by a tuple such as
//! `(repeat_seed, TAG, client_id, round)` folded through SplitMix64, so a
//! client's stream does not depend on which thread trains it or in which
//! order clients are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub mod tag {
    pub const PROFILES: u64 = 0x5052_4f46;
    pub const DATA: u64 = 0x4441_5441;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const INIT: u64 = 0x494e_4954;
    pub const CLIENT_INIT: u64 = 0x4349_4e54;
    pub const SAMPLING: u64 = 0x5341_4d50;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const FJORD: u64 = 0x464a_5244;
    pub const SERVER: u64 = 0x5345_5256;
    pub const TIERS: u64 = 0x5449_4552;
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds an ordered list of words into one 64-bit seed:
/// `h_0 = 0`, `h_{i+1} = splitmix64(h_i ^ splitmix64(w_i + i))`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().enumerate().fold(0u64, |h, (i, &w)| {
        splitmix64(h ^ splitmix64(w.wrapping_add(i as u64)))
    })
}

pub fn stream(parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(mix_seed(parts))
}
