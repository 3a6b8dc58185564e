//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! Every random stream in a run is keyed by the master seed plus a short
//! tuple of integers (iteration, worker, member, purpose tag). Streams never
//! share state, so work can be scattered across threads in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep otherwise identical key tuples in separate streams.
pub mod tag {
    pub const INIT_ACTOR: u64 = 1;
    pub const INIT_CRITIC: u64 = 2;
    pub const TASKS: u64 = 3;
    pub const PERTURB: u64 = 4;
    pub const ADAPT: u64 = 5;
    pub const EVAL: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `master` with a splitmix64 chain.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A ChaCha8 generator keyed by `derive_seed(master, parts)`.
pub fn keyed_rng(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}
