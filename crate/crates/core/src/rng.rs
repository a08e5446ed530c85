//! Seed derivation shared by the recommenders and the experiment runner.
//!
//! Every probabilistic operation takes its generator explicitly. Parallel
//! callers never share a generator: each target user gets its own ChaCha
//! stream, keyed by the user id, on top of the run seed.

use crate::UserId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DefaultRng = ChaCha8Rng;

/// Stream reserved for whole-population work (Step-1 clustering, splits).
const SHARED_STREAM: u64 = 0;

pub fn seeded(seed: u64) -> DefaultRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHARED_STREAM);
    rng
}

/// Generator for one target user. User ids start at 1, so the stream never
/// collides with [`seeded`].
pub fn for_user(seed: u64, user: UserId) -> DefaultRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(user));
    rng
}

/// Seed of run `run` in a multi-run experiment.
pub fn run_seed(base_seed: u64, run: u64) -> u64 {
    base_seed ^ run
}
