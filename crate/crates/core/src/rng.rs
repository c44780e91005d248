//! Seeded randomness.
//!
//! All randomness flows from a `u64` master seed. Sub-streams (per layer,
//! per client, per round) are obtained with [`derive_seed`], which mixes
//! the master seed with a list of tags through SplitMix64 finalizers, so
//! parallel and serial execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `master`. Order matters.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Stream tags, so different consumers of one master seed never collide.
pub mod stream {
    pub const TASK: u64 = 0x7461_736b;
    pub const PARTITION: u64 = 0x7061_7274;
    pub const INIT: u64 = 0x696e_6974;
    pub const CLIENT: u64 = 0x636c_6e74;
    pub const SERVER: u64 = 0x7376_7272;
    pub const REINIT: u64 = 0x7265_696e;
}
