//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 generator keyed by the run seed
//! and a 64-bit stream id. Stream ids are derived from a purpose tag and an
//! index (image index, epoch, layer), so two consumers never share a stream and
//! results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Augment = 4,
    Split = 5,
    Lime = 6,
    Shap = 7,
    Synthetic = 8,
}

/// Generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ (index & 0x00ff_ffff_ffff_ffff));
    rng
}

/// Combine two indices (e.g. epoch and image index) into one stream index.
pub fn pair_index(a: u64, b: u64) -> u64 {
    (a << 28) ^ b
}
