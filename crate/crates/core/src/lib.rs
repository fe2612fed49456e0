//! Survival cluster analysis.

pub mod dpmix;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod ndnet;
pub mod special;
pub mod survmodel;
pub mod trainer;

pub use error::{Result, ScaError};

/// Seeded generator used everywhere reproducibility matters.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
