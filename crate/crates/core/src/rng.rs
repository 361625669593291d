//! Seed derivation.
//!
//! Every independent unit of work (a game, a training minibatch, a corpus
//! sequence) draws from its own ChaCha stream selected by `(master, index)`,
//! so results never depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// RNG for unit `index` under `master`.
pub fn stream(master: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Derives a child master seed, used to keep e.g. corpus generation and
/// parameter initialisation on unrelated streams.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
