//! Seeded random streams.
//!
//! Every random draw in the crate goes through a ChaCha8 generator keyed by
//! `(seed, stream)`, so independent consumers (initialisers, samplers,
//! splitters) never share state and results are portable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers keep unrelated consumers of one seed apart.
pub mod stream {
    pub const INIT_PSI: u64 = 1;
    pub const INIT_HEADS: u64 = 2;
    pub const INIT_PHI: u64 = 3;
    pub const DATA: u64 = 10;
    pub const SPLIT: u64 = 11;
    pub const STRUCTURE: u64 = 12;
    pub const BATCHES: u64 = 20;
    pub const DIAGNOSTICS: u64 = 30;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for the `index`-th derived item (splitmix64 finaliser).
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
