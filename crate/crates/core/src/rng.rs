//! Seed plumbing.
//!
//! Every stochastic operation in the crate takes an explicit `u64` seed. Child
//! seeds are derived with a SplitMix64 finalizer so that independent streams
//! (initialisation, per-round training, per-sample MC dropout) never share
//! state, and sample-keyed seeds hash the sample id with FNV-1a so that they
//! are stable across platforms and toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 output function.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed for a numbered stream.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Seed keyed on a sample id rather than its position in any list.
pub fn id_seed(seed: u64, id: &str) -> u64 {
    derive(seed, fnv1a(id.as_bytes()))
}

/// Named streams used by the active loop.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const INITIAL_SAMPLE: u64 = 2;
    pub const INITIAL_PAIRS: u64 = 3;
    pub const CANDIDATE_POOL: u64 = 4;
    pub const TRAIN: u64 = 0x100;
    pub const PREDICT: u64 = 0x200;
    pub const SELECT: u64 = 0x300;
    pub const PAIRS: u64 = 0x400;
}
