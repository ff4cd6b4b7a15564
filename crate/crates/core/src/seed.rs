//! Seed splitting.
//!
//! Every random component (data generation, client sampling, local SGD,
//! aggregation noise, policy draws) gets its own stream derived from the run
//! seed and a path of tags. Changing the draws of one component never shifts
//! the draws of another, and no global RNG state exists anywhere.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags for the top-level components of a run.
pub mod tag {
    pub const DATA: u64 = 0x_da7a;
    pub const SPLIT: u64 = 0x_5b17;
    pub const SURROGATE: u64 = 0x_5e7a;
    pub const TEST: u64 = 0x_7e57;
    pub const INIT: u64 = 0x_1a17;
    pub const SAMPLING: u64 = 0x_5a3b;
    pub const CLIENT: u64 = 0x_c11e;
    pub const ATTACK: u64 = 0x_a77a;
    pub const NOISE: u64 = 0x_2015;
    pub const POLICY_D: u64 = 0x_d0d0;
    pub const POLICY_A: u64 = 0x_a0a0;
    pub const ENV: u64 = 0x_e2e2;
    pub const TYPES: u64 = 0x_7195;
    pub const ADAPT: u64 = 0x_ada9;
    pub const READAPT: u64 = 0x_2ead;
    pub const RESPONSE: u64 = 0x_b2e5;
    pub const EVAL: u64 = 0x_e7a1;
}

/// Derives a child seed from `seed` and one tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

/// Derives a child seed by folding a path of tags.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &t| derive(s, t))
}

/// A fresh generator for the given seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
