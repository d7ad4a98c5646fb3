//! Seeded generators and brute-force reference implementations used by the
//! property and acceptance tests.

pub mod conformal;
pub mod constraints;
pub mod relational;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
