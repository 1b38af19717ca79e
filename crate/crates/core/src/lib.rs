//! Deep metric learning engine for volumetric data.
//!
//! The crate provides the full pipeline: an autodiff tensor core, 3D network
//! layers, volume preprocessing and storage, balanced batch sampling,
//! multi-similarity pair mining, triplet and cross-entropy losses, two-phase
//! training, k-fold evaluation with confidence intervals, occlusion
//! sensitivity maps, and an exact t-SNE projector.

pub mod error;
pub mod nn;
pub mod evaluator;
pub mod explain;
pub mod losses;
pub mod miner;
pub mod model;
pub mod projector;
pub mod sampler;
pub mod trainer;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor, TensorId};

/// SplitMix64 step; derives decorrelated RNG streams from one root seed.
pub fn seed_mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
