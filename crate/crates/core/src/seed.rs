//! Seed derivation shared by every sampled quantity in the pipeline.
//!
//! All randomness flows from ChaCha8 streams whose seeds are derived from a
//! base seed plus a short path of tags, so independent consumers never share
//! a stream and results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each tag in turn.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &tag| {
        splitmix64(acc.rotate_left(23) ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

pub fn rng_from(base: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags. Changing any of these changes every downstream result.
pub mod tag {
    pub const INIT: u64 = 0x1001;
    pub const SHUFFLE: u64 = 0x1002;
    pub const AUGMENT: u64 = 0x1003;
    pub const ROWS: u64 = 0x2001;
    pub const COLS: u64 = 0x2002;
    pub const PAIRS: u64 = 0x2003;
    pub const ROTATION: u64 = 0x3001;
    pub const BALL: u64 = 0x4001;
    pub const SEPARATED: u64 = 0x4002;
    pub const EVAL_IMAGES: u64 = 0x5001;
}
