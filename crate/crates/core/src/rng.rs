//! Seeded randomness.
//!
//! Every random draw in the crate (parameter init, shuffling, scene synthesis,
//! noise) comes from a [`SplitMix64`] generator: a 64-bit state advanced by the
//! golden-ratio increment `0x9E3779B97F4A7C15` and finalized with the
//! Stafford variant-13 mixer. Its output is identical on every platform.
//!
//! Sub-streams (one per image, per noise seed, ...) are keyed with
//! [`derive_seed`], so per-item work can be scheduled in any order.

use rand::SeedableRng;

pub use rand_xoshiro::SplitMix64;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of sub-stream `index` from `seed`:
/// `mix64(seed + (index + 1) · γ)` with wrapping arithmetic.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}
